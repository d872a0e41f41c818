//! Acceptance suite. Each criterion runs in turn and prints one PASS/FAIL
//! line; the process exits non-zero if any criterion fails.
//!
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test -p spineseg --test acceptance -- overfit`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spineseg::augment::{
    apply_intensity, apply_spatial, draw_translation, elastic_deform, gamma_transform, gaussian_blur, generate_parallel, mirror,
    rotate, sample_augmented, scale, AugmentationPlan, AugmentationSpec, ElasticParams, RandomStream,
};
use spineseg::config::{ExperimentConfig, MatrixEntry};
use spineseg::loss::{tversky, tversky_loss, tversky_loss_grad, TverskyParams, TverskyVariant};
use spineseg::metrics::{binarize, confusion_counts, dice, inter_reader, sensitivity, specificity, Metric, MetricsRecord};
use spineseg::nn::{Dimensionality, ModelConfig, Tensor, UNet};
use spineseg::phantom::{generate_dataset, generate_phantom_case, PhantomSpec, ReaderNoiseSpec};
use spineseg::preprocess::{crop_patch, prepare_case, preprocess_prepared, resample_depth, whiten, PreparedCase, PreprocessConfig, Sample};
use spineseg::report::render_summary;
use spineseg::trainer::{predict_sample, run_crossval, train_fold, CrossvalOptions, CrossvalOutcome, TrainConfig, FOLD_PLAN_FILE, RECORDS_FILE};
use spineseg::volume::{load_manifest, Axis, LesionType, Modality, Volume};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("took {:.1} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Clinical numbers

fn clinical_numbers() -> Check {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).map_err(|e| e.to_string())?;
    ensure(readme.contains("not reproducible"), || "README does not state that clinical results are not reproducible".into())?;
    Ok("clinical per-configuration and inter-reader figures need the private MRI cohort and are not reproduced; \
        the criteria below are phantom-based substitutes"
        .into())
}

// ---------------------------------------------------------------------------
// Metric oracle

fn random_pair(rng: &mut ChaCha8Rng) -> (Array3<u8>, Array3<u8>) {
    let dims = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8));
    let (pp, pr) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let p = Array3::from_shape_fn(dims, |_| u8::from(rng.random_bool(pp)));
    let r = Array3::from_shape_fn(dims, |_| u8::from(rng.random_bool(pr)));
    (p, r)
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut undefined = 0;
    for i in 0..1000 {
        let (p, r) = random_pair(&mut rng);
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for x in 0..p.dim().0 {
            for y in 0..p.dim().1 {
                for z in 0..p.dim().2 {
                    match (p[[x, y, z]], r[[x, y, z]]) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => fn_ += 1,
                        _ => tn += 1,
                    }
                }
            }
        }
        let c = confusion_counts(&p, &r).map_err(|e| e.to_string())?;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || format!("pair {i}: counts {c:?}"))?;
        let oracle = [
            (2 * tp + fp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
            (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
            (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64),
        ];
        let got = [dice(&p, &r).ok(), sensitivity(&p, &r).ok(), specificity(&p, &r).ok()];
        for (k, (o, g)) in oracle.iter().zip(&got).enumerate() {
            match (o, g) {
                (Some(o), Some(g)) => ensure((o - g).abs() <= 1e-12, || format!("pair {i} metric {k}: {g} vs {o}"))?,
                (None, None) => undefined += 1,
                _ => return Err(format!("pair {i} metric {k}: definedness differs ({g:?} vs {o:?})")),
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("1000 pairs up to 16x16x8 exact, {undefined} undefined metrics agreed, {:.2} s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Tversky reduces to soft Dice

fn random_maps(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    let pred = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let mut reference: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    reference[rng.random_range(0..n)] = 1;
    (pred, reference)
}

fn soft_dice(pred: &[f64], reference: &[u8]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sr = 0.0;
    for (&p, &r) in pred.iter().zip(reference) {
        let r = r as f64;
        inter += r * p;
        sp += p;
        sr += r;
    }
    2.0 * inter / (sr + sp)
}

fn tversky_dice() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let classic = TverskyParams { alpha: 0.5, beta: 0.5, variant: TverskyVariant::ClassicIndex, smooth: 1e-12 };
    let doubled = TverskyParams { variant: TverskyVariant::DoubledNumerator, ..classic };
    let mut worst = (0f64, 0f64);
    for i in 0..200 {
        let n = rng.random_range(4..=512);
        let (pred, reference) = random_maps(&mut rng, n);
        let c = tversky(&pred, &reference, &classic).map_err(|e| e.to_string())?;
        let d = tversky(&pred, &reference, &doubled).map_err(|e| e.to_string())?;
        let sd = soft_dice(&pred, &reference);
        worst = (worst.0.max((c - sd).abs()), worst.1.max((d - 2.0 * c).abs()));
        ensure((c - sd).abs() < 1e-9, || format!("pair {i}: classic {c} vs soft dice {sd}"))?;
        ensure((d - 2.0 * c).abs() < 1e-9, || format!("pair {i}: doubled {d} vs 2x classic {}", 2.0 * c))?;
    }
    // As smooth shrinks the doubled variant approaches twice the classic one.
    let (pred, reference) = random_maps(&mut rng, 64);
    let gaps: Vec<f64> = [1e-2, 1e-4, 1e-6, 1e-8]
        .iter()
        .map(|&smooth| {
            let c = tversky(&pred, &reference, &TverskyParams { smooth, ..classic }).unwrap();
            let d = tversky(&pred, &reference, &TverskyParams { smooth, ..doubled }).unwrap();
            (d - 2.0 * c).abs()
        })
        .collect();
    ensure(gaps.windows(2).all(|w| w[1] <= w[0]), || format!("gap does not shrink with smooth: {gaps:?}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("200 pairs, max |classic - soft dice| {:.1e}, max |doubled - 2 classic| {:.1e}", worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// Gradient checks

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn mini_net_gradient() -> Result<f64, String> {
    let cfg = ModelConfig {
        dimensionality: Dimensionality::TwoD,
        in_channels: 1,
        base_width: 4,
        levels: 2,
        input_shape: [8, 8, 1],
        param_budget: None,
        init_seed: 5,
    };
    let mut net = UNet::<f64>::new(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_vec([2, 1, 8, 8, 1], (0..128).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    let target: Vec<u8> = (0..128).map(|i| u8::from((i % 8) - 3 + ((i / 8) % 8) > 4)).collect();
    let params = TverskyParams { alpha: 0.3, beta: 0.7, ..Default::default() };
    let loss_of = |net: &mut UNet<f64>| -> f64 {
        let cache = net.forward_train(&x).unwrap();
        tversky_loss(&cache.prob().data, &target, &params).unwrap()
    };

    net.zero_grad();
    let cache = net.forward_train(&x).map_err(|e| e.to_string())?;
    let (_, g) = tversky_loss_grad(&cache.prob().data, &target, &params).map_err(|e| e.to_string())?;
    let dprob = Tensor::from_vec(cache.prob().shape, g);
    net.backward(&cache, &dprob).map_err(|e| e.to_string())?;
    drop(cache);
    let analytic: Vec<f64> = net.params_mut().into_iter().filter_map(|p| p.grad.map(|g| g.clone())).flatten().collect();

    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_tensors = net.params_mut().len();
    for t in 0..n_tensors {
        let (trainable, len) = {
            let views = net.params_mut();
            (views[t].grad.is_some(), views[t].value.len())
        };
        if !trainable {
            continue;
        }
        for i in 0..len {
            let orig = net.params_mut()[t].value[i];
            net.params_mut()[t].value[i] = orig + h;
            let up = loss_of(&mut net);
            net.params_mut()[t].value[i] = orig - h;
            let down = loss_of(&mut net);
            net.params_mut()[t].value[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0f64;
    for i in 0..50 {
        let (pred, reference) = random_maps(&mut rng, 16);
        let pred: Vec<f64> = pred.into_iter().map(|p| p.clamp(0.05, 0.95)).collect();
        let alpha = rng.random_range(0.1..0.9);
        let variant = if i % 2 == 0 { TverskyVariant::ClassicIndex } else { TverskyVariant::DoubledNumerator };
        let params = TverskyParams { alpha, beta: rng.random_range(0.1..0.9), variant, ..Default::default() };
        let (_, analytic) = tversky_loss_grad(&pred, &reference, &params).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let numeric: Vec<f64> = (0..16)
            .map(|k| {
                let mut up = pred.clone();
                let mut down = pred.clone();
                up[k] += h;
                down[k] -= h;
                (tversky_loss(&up, &reference, &params).unwrap() - tversky_loss(&down, &reference, &params).unwrap()) / (2.0 * h)
            })
            .collect();
        let e = rel_err(&analytic, &numeric);
        worst = worst.max(e);
        ensure(e < 1e-4, || format!("instance {i}: relative error {e:.2e}"))?;
    }
    let net_err = mini_net_gradient()?;
    ensure(net_err < 1e-3, || format!("mini-net relative error {net_err:.2e}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("loss: 50 instances, worst {worst:.1e}; 2-level net on 8x8: {net_err:.1e}"))
}

// ---------------------------------------------------------------------------
// Parameter budget

fn parameter_budget() -> Check {
    let start = Instant::now();
    let count = |d| UNet::<f32>::new(ModelConfig::standard(d, 2)).map(|n| n.param_count()).map_err(|e| e.to_string());
    let two = count(Dimensionality::TwoD)?;
    let three = count(Dimensionality::ThreeD)?;
    let ratio = three as f64 / two as f64;
    ensure((two as f64 - 1.4e6).abs() <= 0.15 * 1.4e6, || format!("2D count {two}"))?;
    ensure((three as f64 - 4.0e6).abs() <= 0.15 * 4.0e6, || format!("3D count {three}"))?;
    ensure((2.6..=3.0).contains(&ratio), || format!("ratio {ratio:.3}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("2D {two}, 3D {three}, ratio {ratio:.3}"))
}

// ---------------------------------------------------------------------------
// Augmentation

fn phantom_prepared(seed: u64, modalities: &[Modality], patch: [usize; 3]) -> PreparedCase {
    let spec = PhantomSpec { reader: None, ..Default::default() };
    let t = if seed.is_multiple_of(3) { LesionType::Sclerotic } else { LesionType::Lytic };
    let case = generate_phantom_case(&spec, &format!("a{seed}"), t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0;
    let cfg = PreprocessConfig { patch_size: patch, modalities: modalities.to_vec(), ..Default::default() };
    prepare_case(&case, &cfg).unwrap()
}

fn max_abs_diff(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn bits(s: &Sample) -> (Vec<u32>, Vec<u8>, Vec<u8>) {
    (s.image.iter().map(|v| v.to_bits()).collect(), s.mask.iter().copied().collect(), s.support.iter().copied().collect())
}

fn augmentation_suite() -> Check {
    let start = Instant::now();
    let both = [Modality::T1, Modality::T2];
    let cases: Vec<PreparedCase> = (1..=3).map(|i| phantom_prepared(i, &both, [64, 64, 32])).collect();
    let samples: Vec<Sample> = cases.iter().map(|p| preprocess_prepared(p).unwrap()).collect();

    let axes = [Axis::Sagittal, Axis::Vertical, Axis::Depth];
    for s in &samples {
        for bits_ in 1..8u8 {
            let chosen: Vec<Axis> = (0..3).filter(|i| bits_ & (1 << i) != 0).map(|i| axes[i]).collect();
            ensure(mirror(&mirror(s, &chosen), &chosen) == *s, || format!("double flip over {chosen:?} is not the identity"))?;
        }
    }

    let identity = AugmentationPlan {
        mirror_axes: Vec::new(),
        scale: Some(1.0),
        rotate: Some((0.0, 0.0)),
        elastic: Some(ElasticParams { sigma: 0.2, grid_spacing: 32, magnitude: 0.0 }),
        blur: Some(0.0),
        gamma: Some(1.0),
    };
    let mut identity_err = 0f64;
    for s in &samples {
        let out = apply_intensity(apply_spatial(s.clone(), &identity, &mut ChaCha8Rng::seed_from_u64(0)), &identity);
        identity_err = identity_err.max(max_abs_diff(&out.image, &s.image));
        ensure(out.mask == s.mask, || "identity composition changed the mask".into())?;
    }
    ensure(identity_err <= 1e-6, || format!("identity composition differs by {identity_err:.2e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = AugmentationSpec::default();
    let binary = |m: &Array3<u8>| m.iter().all(|&v| v <= 1);
    for s in &samples {
        for _ in 0..4 {
            let f = rng.random_range(spec.scale_range[0]..=spec.scale_range[1]);
            let (t, g) = (rng.random_range(-30.0..=30.0), rng.random_range(-20.0..=20.0));
            let e = ElasticParams { sigma: rng.random_range(0.0..=0.3), grid_spacing: 32, magnitude: spec.elastic_magnitude };
            let outs = [
                mirror(s, &axes),
                scale(s, f),
                rotate(s, t, g),
                elastic_deform(s, e, &mut rng),
                gaussian_blur(s, rng.random_range(0.0..=0.5)),
                gamma_transform(s, rng.random_range(0.5..=2.0)),
            ];
            ensure(outs.iter().all(|o| binary(&o.mask) && binary(&o.support)), || "a transform produced a non-binary mask".into())?;
        }
    }
    let always = AugmentationSpec { apply_probability: 1.0, ..spec.clone() };
    for seed in 0..10 {
        let s = sample_augmented(&cases[seed as usize % 3], &always, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
        ensure(binary(&s.mask), || "full pipeline produced a non-binary mask".into())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inside = |v: f64, r: [f64; 2]| v >= r[0] && v <= r[1];
    for i in 0..10_000 {
        let p = AugmentationPlan::draw(&always, &mut rng);
        let (dx, dy) = draw_translation(&always, &mut rng);
        let ok = (-20..=20).contains(&dx)
            && (-20..=20).contains(&dy)
            && p.scale.is_some_and(|f| inside(f, [0.6, 1.4]))
            && p.rotate.is_some_and(|(t, s)| inside(t, [-30.0, 30.0]) && inside(s, [-20.0, 20.0]))
            && p.elastic.is_some_and(|e| inside(e.sigma, [0.0, 0.3]))
            && p.blur.is_some_and(|b| inside(b, [0.0, 0.5]))
            && p.gamma.is_some_and(|g| inside(g, [0.5, 2.0]));
        ensure(ok, || format!("draw {i} outside the configured ranges: {p:?} ({dx}, {dy})"))?;
    }

    let requests: Vec<(usize, u64)> = (0..16).map(|j| ((j % 3) as usize, j)).collect();
    let stream = RandomStream::new(99);
    let reference: Vec<_> = generate_parallel(&cases, &requests, &spec, &stream, 1).map_err(|e| e.to_string())?.iter().map(bits).collect();
    for workers in 2..=8 {
        let got: Vec<_> = generate_parallel(&cases, &requests, &spec, &stream, workers).map_err(|e| e.to_string())?.iter().map(bits).collect();
        ensure(got == reference, || format!("{workers} workers differ from 1 worker"))?;
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "involution exact, identity composition {identity_err:.1e}, masks binary, 10^4 draws in range, bit-identical for 1-8 workers, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Preprocessing

fn preprocessing() -> Check {
    let start = Instant::now();
    let mut worst_ramp = 0f64;
    for depth in 15..=28 {
        let v = Volume::new(Array3::from_shape_fn((4, 3, depth), |(x, y, z)| (0.5 * z as f64 + x as f64 - 0.25 * y as f64) as f32), [1.0, 1.0, 3.5], [0.0; 3])
            .map_err(|e| e.to_string())?;
        let r = resample_depth(&v, 64).map_err(|e| e.to_string())?;
        ensure(r.dims() == [4, 3, 64], || format!("depth {depth}: output dims {:?}", r.dims()))?;
        for ((x, y, z), &val) in r.data.indexed_iter() {
            let t = z as f64 * (depth - 1) as f64 / 63.0;
            worst_ramp = worst_ramp.max((val as f64 - (0.5 * t + x as f64 - 0.25 * y as f64)).abs());
        }
    }
    ensure(worst_ramp <= 1e-6, || format!("ramp error {worst_ramp:.2e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst_white = 0f64;
    for _ in 0..20 {
        let shift = rng.random_range(-100.0..100.0);
        let spread = rng.random_range(0.01..50.0);
        let img = Array4::from_shape_fn((2, 16, 16, 8), |_| (shift + spread * rng.sample::<f64, _>(StandardNormal)) as f32);
        let w = whiten(&img).map_err(|e| e.to_string())?;
        for ch in w.outer_iter() {
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            worst_white = worst_white.max(mean.abs()).max((std - 1.0).abs());
        }
    }
    ensure(worst_white < 1e-5, || format!("whitening error {worst_white:.2e}"))?;

    let dims = (40, 36, 20);
    let v = Volume::new(Array3::from_elem(dims, 1.0f32), [1.0; 3], [0.0; 3]).map_err(|e| e.to_string())?;
    for _ in 0..200 {
        let center = [rng.random_range(-10.0..50.0), rng.random_range(-10.0..46.0), rng.random_range(-5.0..25.0)];
        let size = [rng.random_range(1..48), rng.random_range(1..48), rng.random_range(1..24)];
        let c = crop_patch(&v, center, size, 0.0).map_err(|e| e.to_string());
        let Ok(c) = c else { continue };
        let mut inside = 0usize;
        for x in 0..size[0] as i64 {
            for y in 0..size[1] as i64 {
                for z in 0..size[2] as i64 {
                    let g = [c.offset[0] + x, c.offset[1] + y, c.offset[2] + z];
                    if g[0] >= 0 && g[1] >= 0 && g[2] >= 0 && g[0] < 40 && g[1] < 36 && g[2] < 20 {
                        inside += 1;
                    }
                }
            }
        }
        let padded = size.iter().product::<usize>() - inside;
        ensure(c.support.iter().filter(|&&s| s == 0).count() == padded, || format!("padding count mismatch at {center:?} size {size:?}"))?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("ramps exact to {worst_ramp:.1e} at depth 64, whitening {worst_white:.1e}, padding counts match brute force"))
}

// ---------------------------------------------------------------------------
// Overfit sanity

fn overfit() -> Check {
    let start = Instant::now();
    let p = phantom_prepared(1, &[Modality::T1], [64, 64, 16]);
    let sample = preprocess_prepared(&p).map_err(|e| e.to_string())?;
    let model = ModelConfig { base_width: 8, levels: 4, input_shape: [64, 64, 1], param_budget: None, init_seed: 0, ..ModelConfig::standard(Dimensionality::TwoD, 1) };
    let iterations = 300;
    let train = TrainConfig { iterations, batch_size_2d: 16, slices_per_volume: 16, ..Default::default() };
    let out = train_fold(std::slice::from_ref(&p), &model, &train, &AugmentationSpec::disabled(), &RandomStream::new(0), &mut |_, _| {})
        .map_err(|e| e.to_string())?;
    let prob = predict_sample(&out.model, &sample, 16).map_err(|e| e.to_string())?;
    let d = dice(&binarize(&prob), &sample.mask).map_err(|e| e.to_string())?;
    ensure(d >= 0.95, || format!("dice {d:.4} after {iterations} iterations"))?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(format!("dice {d:.4} after {iterations} iterations on one 2D [T1] sample, {:.0} s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Desk-scale end-to-end

const DESK_CASES: usize = 24;
const DESK_DATA_SEED: u64 = 2024;
const DESK_MIN_DICE: f64 = 0.70;
const DESK_MIN_SPECIFICITY: f64 = 0.95;

fn desk_config(iterations: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{"seed": 11, "dataset": {{"manifest": "data/manifest.json"}},
  "preprocess": {{"target_depth": 64, "patch_size": [64, 64, 64]}},
  "model": {{"base_width": 8, "levels": 4, "enforce_budget": false}},
  "train": {{"iterations": {iterations}, "batch_size_2d": 16}},
  "matrix": [{{"dimensionality": "2d", "modalities": ["T1", "T2"]}}],
  "folds": 4}}"#
    );
    ExperimentConfig::parse(&text).expect("desk config is valid")
}

fn mean_of(records: &[MetricsRecord], m: Metric) -> f64 {
    let v: Vec<f64> = records.iter().filter(|r| r.config_id != "IRV").filter_map(|r| r.metric(m)).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn desk_end_to_end(data: &Path) -> Check {
    let start = Instant::now();
    let manifest = load_manifest(data.join("manifest.json")).map_err(|e| e.to_string())?;
    let run = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = desk_config(500);
    let out = run_crossval(&cfg, &manifest, run.path(), &CrossvalOptions::default(), &mut |_| {}).map_err(|e| e.to_string())?;
    let held_out = out.records.iter().filter(|r| r.config_id != "IRV").count();
    ensure(held_out == DESK_CASES, || format!("{held_out} held-out records"))?;
    let d = mean_of(&out.records, Metric::Dice);
    let s = mean_of(&out.records, Metric::Specificity);
    ensure(d >= DESK_MIN_DICE, || format!("mean dice {d:.3} < {DESK_MIN_DICE}"))?;
    ensure(s >= DESK_MIN_SPECIFICITY, || format!("mean specificity {s:.4} < {DESK_MIN_SPECIFICITY}"))?;
    within(start.elapsed(), Duration::from_secs(45 * 60))?;
    Ok(format!(
        "{DESK_CASES} cases, 4 folds, 2D [T1+T2], 500 iterations: mean dice {d:.3}, sensitivity {:.3}, specificity {s:.4}, {:.1} min",
        mean_of(&out.records, Metric::Sensitivity),
        start.elapsed().as_secs_f64() / 60.0
    ))
}

// ---------------------------------------------------------------------------
// Inter-reader tooling

fn inter_reader_tooling() -> Check {
    let start = Instant::now();
    let spec = PhantomSpec::default();
    let target = ReaderNoiseSpec::default().target_dice;
    let mut records = Vec::new();
    for i in 0..50u64 {
        let t = if i % 3 == 2 { LesionType::Sclerotic } else { LesionType::Lytic };
        let case = generate_phantom_case(&spec, &format!("r{i:02}"), t, &mut ChaCha8Rng::seed_from_u64(500 + i)).map_err(|e| e.to_string())?.0;
        let second = case.second_reader_mask.as_ref().ok_or("phantom has no second reader")?;
        records.push(inter_reader(&case.mask.data, &second.data, &case.id).map_err(|e| e.to_string())?);
    }
    let irv: Vec<f64> = records.iter().filter_map(|r| r.metric(Metric::Dice)).collect();
    let measured = irv.iter().sum::<f64>() / irv.len() as f64;
    ensure((measured - target).abs() <= 0.03, || format!("mean inter-reader dice {measured:.4}, target {target}"))?;

    let mut all = records.clone();
    for e in MatrixEntry::full_matrix() {
        all.push(MetricsRecord { config_id: e.id(), ..records[0].clone() });
    }
    let table = render_summary(&all).map_err(|e| e.to_string())?;
    let header = table.csv.lines().next().unwrap_or_default();
    ensure(header.ends_with(",3D [T1+T2],IRV"), || format!("summary header {header:?}"))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("50 masks, mean dice {measured:.4} (target {target}), IRV column rendered last, {:.0} s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Determinism audit

fn records_schema(run: &Path) -> Result<(String, Vec<(String, String, String)>), String> {
    let text = std::fs::read_to_string(run.join(RECORDS_FILE)).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let keys = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].to_string())
        })
        .collect();
    Ok((header, keys))
}

fn transform_logs(run: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(run).map_err(|e| e.to_string())? {
        let dir = entry.map_err(|e| e.to_string())?.path();
        if !dir.is_dir() {
            continue;
        }
        for fold in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let f = fold.map_err(|e| e.to_string())?.path().join("transforms.jsonl");
            if f.is_file() {
                out.insert(f.strip_prefix(run).unwrap().display().to_string(), std::fs::read(&f).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn determinism_audit(data: &Path) -> Check {
    let manifest = load_manifest(data.join("manifest.json")).map_err(|e| e.to_string())?;
    let cfg = desk_config(25);
    let opts = CrossvalOptions { folds: Some(vec![0, 2]) };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |dir: &Path| -> Result<CrossvalOutcome, String> {
        run_crossval(&cfg, &manifest, dir, &opts, &mut |_| {}).map_err(|e| e.to_string())
    };
    let (ra, rb) = (run(a.path())?, run(b.path())?);
    let plan = |d: &Path| std::fs::read(d.join(FOLD_PLAN_FILE)).map_err(|e| e.to_string());
    ensure(plan(a.path())? == plan(b.path())? && ra.plan == rb.plan, || "fold plans differ".into())?;
    let (ta, tb) = (transform_logs(a.path())?, transform_logs(b.path())?);
    ensure(!ta.is_empty() && ta == tb, || "augmentation transform logs differ".into())?;
    ensure(records_schema(a.path())? == records_schema(b.path())?, || "records CSV schemas differ".into())?;
    let same_weights = ra.manifest.checkpoint_sha256 == rb.manifest.checkpoint_sha256;
    let same_records = std::fs::read(a.path().join(RECORDS_FILE)).ok() == std::fs::read(b.path().join(RECORDS_FILE)).ok();
    ensure(!ra.manifest.backend_determinism.is_empty(), || "run manifest lacks the backend determinism note".into())?;
    Ok(format!(
        "fold plans, {} transform logs and records schema identical; weights {} and records values {} across runs (logged in run_manifest.json)",
        ta.len(),
        if same_weights { "bit-identical" } else { "DIFFER" },
        if same_records { "identical" } else { "differ" }
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let data_dir = tempfile::tempdir().expect("temp dir");
    let data = data_dir.path().join("data");
    let mut dataset_ready = false;
    let mut ensure_dataset = || -> Result<(), String> {
        if !dataset_ready {
            generate_dataset(DESK_CASES, &PhantomSpec::default(), DESK_DATA_SEED, &data).map_err(|e| e.to_string())?;
            dataset_ready = true;
        }
        Ok(())
    };

    type Criterion<'a> = (&'a str, Box<dyn FnOnce(&mut dyn FnMut() -> Result<(), String>) -> Check + 'a>);
    let data_path = data.clone();
    let data_path2 = data.clone();
    let criteria: Vec<Criterion> = vec![
        ("clinical-numbers-not-reproducible", Box::new(|_| clinical_numbers())),
        ("metric-oracle", Box::new(|_| metric_oracle())),
        ("tversky-dice-reduction", Box::new(|_| tversky_dice())),
        ("gradient-check", Box::new(|_| gradient_check())),
        ("parameter-budget", Box::new(|_| parameter_budget())),
        ("augmentation-suite", Box::new(|_| augmentation_suite())),
        ("preprocessing", Box::new(|_| preprocessing())),
        ("overfit-sanity", Box::new(|_| overfit())),
        ("inter-reader-tooling", Box::new(|_| inter_reader_tooling())),
        ("desk-end-to-end", Box::new(move |prep| prep().and_then(|_| desk_end_to_end(&data_path)))),
        ("determinism-audit", Box::new(move |prep| prep().and_then(|_| determinism_audit(&data_path2)))),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !wanted(name) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut ensure_dataset))).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1} s]: {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
