//! Mini-batch training over the on-the-fly augmented sample stream,
//! prediction of held-out cases and the cross-validation driver.

mod crossval;
mod folds;

use std::path::PathBuf;

use ndarray::{s, Array3};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crossval::{run_crossval, CrossvalOutcome, CrossvalOptions, RunManifest, FOLD_PLAN_FILE, RECORDS_FILE, RUN_MANIFEST_FILE};
pub use folds::{make_folds, FoldPlan};

use crate::augment::{generate_parallel, AugmentError, AugmentationSpec, RandomStream};
use crate::loss::{tversky_loss_grad, TverskyParams};
use crate::metrics::{merge_slice_predictions, MetricError};
use crate::nn::{Adam, AdamConfig, Dimensionality, ModelConfig, NnError, Tensor, UNet};
use crate::preprocess::{PreparedCase, PreprocessError, Provenance, Sample};
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at iteration {iteration}: {loss}")]
    DivergedLoss { iteration: usize, loss: f64 },
    #[error("{cases} cases cannot fill {k} folds")]
    TooFewCases { cases: usize, k: usize },
    #[error("training and validation overlap: {0}")]
    Overlap(String),
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Mini-batch size in slices for the 2-D network.
    pub batch_size_2d: usize,
    /// Mini-batch size in volumes for the 3-D network.
    pub batch_size_3d: usize,
    /// Weight updates per fold; one pass over the generated sample stream.
    pub iterations: usize,
    /// Slices taken from each augmented volume when training the 2-D network.
    pub slices_per_volume: usize,
    /// Threads producing augmented samples.
    pub workers: usize,
    /// Slices per forward pass at prediction time.
    pub eval_batch: usize,
    pub loss: TverskyParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size_2d: 32,
            batch_size_3d: 2,
            iterations: 500,
            slices_per_volume: 8,
            workers: 1,
            eval_batch: 16,
            loss: TverskyParams::default(),
        }
    }
}

impl TrainConfig {
    /// Field name and message of the first violated constraint.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((name, format!("must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("adam_eps", self.adam_eps)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err((name, format!("must lie in [0, 1), got {b}")));
            }
        }
        for (name, v) in [
            ("batch_size_2d", self.batch_size_2d),
            ("batch_size_3d", self.batch_size_3d),
            ("slices_per_volume", self.slices_per_volume),
            ("workers", self.workers),
            ("eval_batch", self.eval_batch),
        ] {
            if v == 0 {
                return Err((name, "must be at least 1".into()));
            }
        }
        self.loss.validate().map_err(|e| ("loss", e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn batch_size(&self, d: Dimensionality) -> usize {
        match d {
            Dimensionality::TwoD => self.batch_size_2d,
            Dimensionality::ThreeD => self.batch_size_3d,
        }
    }
}

/// Training result of one fold.
pub struct TrainOutcome {
    pub model: UNet<f32>,
    /// Mini-batch loss per iteration.
    pub losses: Vec<f64>,
    /// Provenance of every augmented volume, in generation order.
    pub transforms: Vec<Provenance>,
}

/// Deterministic case order of the sample stream: request `j` uses the
/// `j mod n`-th entry of a per-round shuffle of the training cases.
pub fn stream_case(n_cases: usize, request: u64, stream: &RandomStream) -> usize {
    let round = request / n_cases as u64;
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut stream.substream("order", round));
    order[(request % n_cases as u64) as usize]
}

/// Copies sample `z`-slices into a `[B, C, X, Y, 1]` batch.
fn slices_to_batch(picks: &[(&Sample, usize)]) -> (Tensor<f32>, Vec<u8>) {
    let s0 = picks[0].0;
    let c = s0.channels();
    let [nx, ny, _] = s0.spatial_dims();
    let mut x = Tensor::zeros([picks.len(), c, nx, ny, 1]);
    let mut y = Vec::with_capacity(picks.len() * nx * ny);
    for (b, (s, z)) in picks.iter().enumerate() {
        let dst = x.sample_mut(b);
        for ch in 0..c {
            let plane = s.image.slice(s![ch, .., .., *z]);
            for (d, v) in dst[ch * nx * ny..(ch + 1) * nx * ny].iter_mut().zip(plane.iter()) {
                *d = *v;
            }
        }
        y.extend(s.mask.slice(s![.., .., *z]).iter().copied());
    }
    (x, y)
}

fn volumes_to_batch(samples: &[Sample]) -> (Tensor<f32>, Vec<u8>) {
    let s0 = &samples[0];
    let c = s0.channels();
    let [nx, ny, nz] = s0.spatial_dims();
    let mut x = Tensor::zeros([samples.len(), c, nx, ny, nz]);
    let mut y = Vec::with_capacity(samples.len() * nx * ny * nz);
    for (b, s) in samples.iter().enumerate() {
        let img = s.image.as_standard_layout();
        x.sample_mut(b).copy_from_slice(img.as_slice().expect("standard layout"));
        y.extend(s.mask.iter().copied());
    }
    (x, y)
}

/// Trains a freshly initialized model for exactly `cfg.iterations` updates.
///
/// `on_iteration` receives `(iteration, loss)` after every update.
pub fn train_fold(
    train: &[PreparedCase],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentationSpec,
    stream: &RandomStream,
    on_iteration: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(|(k, m)| TrainError::InvalidConfig(format!("{k}: {m}")))?;
    aug.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("no training cases".into()));
    }
    let mut model = UNet::<f32>::new(model_cfg.clone())?;
    let mut adam = Adam::new(cfg.adam());
    let batch = cfg.batch_size(model_cfg.dimensionality);
    let volumes_per_iter = match model_cfg.dimensionality {
        Dimensionality::TwoD => batch.div_ceil(cfg.slices_per_volume),
        Dimensionality::ThreeD => batch,
    } as u64;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut transforms = Vec::new();
    for it in 0..cfg.iterations {
        let first = it as u64 * volumes_per_iter;
        let requests: Vec<(usize, u64)> =
            (first..first + volumes_per_iter).map(|j| (stream_case(train.len(), j, stream), j)).collect();
        let samples = generate_parallel(train, &requests, aug, stream, cfg.workers)?;
        transforms.extend(samples.iter().map(|s| s.provenance.clone()));
        let (x, target) = match model_cfg.dimensionality {
            Dimensionality::ThreeD => volumes_to_batch(&samples),
            Dimensionality::TwoD => {
                let mut picks = Vec::with_capacity(batch);
                for (s, &(_, j)) in samples.iter().zip(&requests) {
                    let depth = s.spatial_dims()[2];
                    let want = cfg.slices_per_volume.min(batch - picks.len());
                    let mut rng = stream.substream("slices", j);
                    if depth >= want {
                        let mut zs = sample_indices(&mut rng, depth, want).into_vec();
                        zs.sort_unstable();
                        picks.extend(zs.into_iter().map(|z| (s, z)));
                    } else {
                        picks.extend((0..want).map(|_| (s, rng.random_range(0..depth))));
                    }
                }
                slices_to_batch(&picks)
            }
        };
        let cache = model.forward_train(&x)?;
        let pred: Vec<f64> = cache.prob().data.iter().map(|&p| p as f64).collect();
        let (loss, grad) = tversky_loss_grad(&pred, &target, &cfg.loss)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::DivergedLoss { iteration: it, loss });
        }
        let dprob = Tensor::from_vec(cache.prob().shape, grad.into_iter().map(|g| g as f32).collect());
        model.backward(&cache, &dprob)?;
        drop(cache);
        adam.step(&mut model);
        losses.push(loss);
        on_iteration(it, loss);
    }
    Ok(TrainOutcome { model, losses, transforms })
}

/// Foreground probabilities on the sample's patch grid. The 2-D network
/// predicts every depth slice; slices are merged back into a volume.
pub fn predict_sample(model: &UNet<f32>, s: &Sample, eval_batch: usize) -> Result<Array3<f32>, TrainError> {
    let [nx, ny, nz] = s.spatial_dims();
    match model.config().dimensionality {
        Dimensionality::ThreeD => {
            let (x, _) = volumes_to_batch(std::slice::from_ref(s));
            let p = model.predict(&x)?;
            Ok(Array3::from_shape_vec((nx, ny, nz), p.data).expect("prediction shape"))
        }
        Dimensionality::TwoD => {
            let mut slices = Vec::with_capacity(nz);
            for chunk in (0..nz).collect::<Vec<_>>().chunks(eval_batch.max(1)) {
                let picks: Vec<(&Sample, usize)> = chunk.iter().map(|&z| (s, z)).collect();
                let (x, _) = slices_to_batch(&picks);
                let p = model.predict(&x)?;
                for (b, &z) in chunk.iter().enumerate() {
                    let plane = ndarray::Array2::from_shape_vec((nx, ny), p.sample(b).to_vec()).expect("slice shape");
                    slices.push((z, plane));
                }
            }
            Ok(merge_slice_predictions(slices, nz)?)
        }
    }
}
