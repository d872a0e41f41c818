use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spineseg::nn::layers::{Conv3d, ConvGeom};
use spineseg::nn::{load_checkpoint, save_checkpoint, Dimensionality, ModelConfig, Tensor, UNet};

fn noise(shape: [usize; 5], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

fn small(d: Dimensionality, in_c: usize, shape: [usize; 3]) -> ModelConfig {
    ModelConfig { base_width: 4, levels: 3, input_shape: shape, param_budget: None, init_seed: 1, ..ModelConfig::standard(d, in_c) }
}

#[test]
fn single_conv_parameter_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g2 = ConvGeom { kernel: [3, 3, 1], stride: [1; 3], pad: [1, 1, 0] };
    let g3 = ConvGeom { kernel: [3, 3, 3], stride: [1; 3], pad: [1; 3] };
    assert_eq!(Conv3d::<f32>::new(1, 1, g2, &mut rng).param_count(), 10);
    assert_eq!(Conv3d::<f32>::new(1, 1, g3, &mut rng).param_count(), 28);
}

#[test]
fn default_2d_output_shape() {
    let net = UNet::<f32>::new(ModelConfig::standard(Dimensionality::TwoD, 2)).unwrap();
    let p = net.predict(&noise([1, 2, 128, 128, 1], 1)).unwrap();
    assert_eq!(p.shape, [1, 1, 128, 128, 1]);
}

#[test]
fn volumetric_output_matches_input_grid() {
    let net = UNet::<f32>::new(small(Dimensionality::ThreeD, 1, [32, 32, 16])).unwrap();
    let p = net.predict(&noise([1, 1, 32, 32, 16], 2)).unwrap();
    assert_eq!(p.shape, [1, 1, 32, 32, 16]);
}

#[test]
fn outputs_are_probabilities_and_repeatable() {
    let net = UNet::<f32>::new(small(Dimensionality::TwoD, 2, [64, 64, 1])).unwrap();
    let x = noise([3, 2, 64, 64, 1], 3);
    let a = net.predict(&x).unwrap();
    let b = net.predict(&x).unwrap();
    assert!(a.data.iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(a.data, b.data);
}

#[test]
fn fresh_model_output_mean_is_moderate() {
    for seed in 0..3 {
        let cfg = ModelConfig { init_seed: seed, param_budget: None, ..ModelConfig::standard(Dimensionality::TwoD, 1) };
        let mut net = UNet::<f32>::new(cfg).unwrap();
        let x = noise([2, 1, 128, 128, 1], 10 + seed);
        let mean = |t: &Tensor<f32>| t.data.iter().map(|&v| v as f64).sum::<f64>() / t.data.len() as f64;
        let m = mean(net.forward_train(&x).unwrap().prob());
        assert!(m > 0.05 && m < 0.95, "seed {seed}: mean {m}");
    }
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = UNet::<f32>::new(small(Dimensionality::TwoD, 1, [32, 32, 1])).unwrap();
    // Populate running statistics so they are part of the round trip.
    net.forward_train(&noise([4, 1, 32, 32, 1], 5)).unwrap();
    save_checkpoint(&net, dir.path()).unwrap();
    let back: UNet<f32> = load_checkpoint(dir.path()).unwrap();
    let x = noise([2, 1, 32, 32, 1], 6);
    assert_eq!(back.predict(&x).unwrap().data, net.predict(&x).unwrap().data);
    assert_eq!(back.param_count(), net.param_count());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = UNet::<f32>::new(small(Dimensionality::TwoD, 2, [32, 32, 1])).unwrap();
    assert!(net.predict(&noise([1, 1, 32, 32, 1], 0)).is_err());
    assert!(net.predict(&noise([1, 2, 16, 32, 1], 0)).is_err());
}
