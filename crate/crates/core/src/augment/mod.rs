//! Seeded augmentation engine: translation + crop, mirroring, scaling,
//! rotation, elastic deformation, Gaussian blur and gamma, applied jointly
//! to image and mask.
//!
//! Composition order is fixed: translate/crop → spatial (mirror, scale,
//! rotate, elastic) → intensity (blur, gamma) → whitening. Every random draw
//! comes from a [`RandomStream`] substream keyed by `(case id, sample index)`,
//! so output does not depend on how work is spread across threads.

pub mod intensity;
mod rng;
pub mod spatial;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use intensity::{gamma_transform, gaussian_blur, gaussian_filter_3d};
pub use rng::RandomStream;
pub use spatial::{elastic_deform, mirror, rotate, scale, ElasticParams};

use crate::preprocess::{whiten_supported, PreparedCase, PreprocessError, Provenance, Sample};
use crate::volume::Axis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("case {0}: mask is empty even at zero translation")]
    EmptyMaskUnrecoverable(String),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// One applied transform and its drawn parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TransformRecord {
    Translate { dx: i64, dy: i64, redraws: u32 },
    Mirror { axes: Vec<Axis> },
    Scale { factor: f64 },
    Rotate { transversal_deg: f64, sagittal_deg: f64 },
    Elastic { sigma: f64, grid_spacing: usize, magnitude: f64 },
    /// Spatial transforms removed all foreground; the translated crop was kept instead.
    SpatialReverted,
    Blur { sigma: f64 },
    Gamma { gamma: f64 },
    Whiten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnabledTransforms {
    pub translate: bool,
    pub mirror: bool,
    pub scale: bool,
    pub rotate: bool,
    pub elastic: bool,
    pub blur: bool,
    pub gamma: bool,
}

impl Default for EnabledTransforms {
    fn default() -> Self {
        EnabledTransforms { translate: true, mirror: true, scale: true, rotate: true, elastic: true, blur: true, gamma: true }
    }
}

impl EnabledTransforms {
    pub fn none() -> Self {
        EnabledTransforms { translate: false, mirror: false, scale: false, rotate: false, elastic: false, blur: false, gamma: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: EnabledTransforms,
    /// Probability that each enabled transform (other than translation) is applied.
    pub apply_probability: f64,
    /// Independent per-axis flip probability.
    pub mirror_probability: f64,
    pub mirror_axes: Vec<Axis>,
    pub scale_range: [f64; 2],
    pub rot_transversal_deg: [f64; 2],
    pub rot_sagittal_deg: [f64; 2],
    pub elastic_sigma: [f64; 2],
    pub elastic_grid: usize,
    pub elastic_magnitude: f64,
    pub blur_sigma: [f64; 2],
    pub gamma_range: [f64; 2],
    pub translate_range_voxels: [i64; 2],
    /// Translation redraws before falling back to zero offset.
    pub max_translate_redraws: u32,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            enabled: EnabledTransforms::default(),
            apply_probability: 0.5,
            mirror_probability: 0.5,
            mirror_axes: vec![Axis::Sagittal, Axis::Vertical, Axis::Depth],
            scale_range: [0.6, 1.4],
            rot_transversal_deg: [-30.0, 30.0],
            rot_sagittal_deg: [-20.0, 20.0],
            elastic_sigma: [0.0, 0.3],
            elastic_grid: 32,
            elastic_magnitude: 2.0,
            blur_sigma: [0.0, 0.5],
            gamma_range: [0.5, 2.0],
            translate_range_voxels: [-20, 20],
            max_translate_redraws: 50,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64, strict: bool) -> Result<(), AugmentError> {
    let ok_lo = if strict { r[0] > min } else { r[0] >= min };
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && ok_lo) {
        return Err(AugmentError::InvalidSpec(format!("{name} = {r:?}")));
    }
    Ok(())
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        AugmentationSpec { enabled: EnabledTransforms::none(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        check_range("scale_range", self.scale_range, 0.0, true)?;
        check_range("rot_transversal_deg", self.rot_transversal_deg, f64::NEG_INFINITY, false)?;
        check_range("rot_sagittal_deg", self.rot_sagittal_deg, f64::NEG_INFINITY, false)?;
        check_range("elastic_sigma", self.elastic_sigma, 0.0, false)?;
        check_range("blur_sigma", self.blur_sigma, 0.0, false)?;
        check_range("gamma_range", self.gamma_range, 0.0, true)?;
        let t = self.translate_range_voxels;
        if t[0] > t[1] {
            return Err(AugmentError::InvalidSpec(format!("translate_range_voxels = {t:?}")));
        }
        for (name, p) in [("apply_probability", self.apply_probability), ("mirror_probability", self.mirror_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidSpec(format!("{name} = {p}")));
            }
        }
        if self.elastic_grid == 0 {
            return Err(AugmentError::InvalidSpec("elastic_grid must be positive".into()));
        }
        if !(self.elastic_magnitude >= 0.0 && self.elastic_magnitude.is_finite()) {
            return Err(AugmentError::InvalidSpec(format!("elastic_magnitude = {}", self.elastic_magnitude)));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Parameters of the spatial and intensity stages drawn for one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationPlan {
    pub mirror_axes: Vec<Axis>,
    pub scale: Option<f64>,
    pub rotate: Option<(f64, f64)>,
    pub elastic: Option<ElasticParams>,
    pub blur: Option<f64>,
    pub gamma: Option<f64>,
}

impl AugmentationPlan {
    /// Draws every parameter up front; all transforms are decided before any is applied.
    pub fn draw<R: Rng + ?Sized>(spec: &AugmentationSpec, rng: &mut R) -> Self {
        let en = spec.enabled;
        let p = spec.apply_probability;
        let mut plan = AugmentationPlan::default();
        if en.mirror {
            for &axis in &spec.mirror_axes {
                if rng.random_bool(spec.mirror_probability) {
                    plan.mirror_axes.push(axis);
                }
            }
        }
        if en.scale && rng.random_bool(p) {
            plan.scale = Some(uniform(rng, spec.scale_range));
        }
        if en.rotate && rng.random_bool(p) {
            plan.rotate = Some((uniform(rng, spec.rot_transversal_deg), uniform(rng, spec.rot_sagittal_deg)));
        }
        if en.elastic && rng.random_bool(p) {
            plan.elastic = Some(ElasticParams {
                sigma: uniform(rng, spec.elastic_sigma),
                grid_spacing: spec.elastic_grid,
                magnitude: spec.elastic_magnitude,
            });
        }
        if en.blur && rng.random_bool(p) {
            plan.blur = Some(uniform(rng, spec.blur_sigma));
        }
        if en.gamma && rng.random_bool(p) {
            plan.gamma = Some(uniform(rng, spec.gamma_range));
        }
        plan
    }
}

/// Integer translation draw in the configured range (inclusive).
pub fn draw_translation<R: Rng + ?Sized>(spec: &AugmentationSpec, rng: &mut R) -> (i64, i64) {
    let [lo, hi] = spec.translate_range_voxels;
    (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

/// Crops the prepared case around `m_c` shifted by a random in-plane offset.
///
/// Offsets whose crop holds no lesion voxel are redrawn; after
/// `max_translate_redraws` failures the zero offset is used. Image values
/// stay raw; the sample is not whitened.
pub fn translate_and_crop<R: Rng + ?Sized>(
    p: &PreparedCase,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<Sample, AugmentError> {
    let mut chosen = None;
    let mut redraws = 0u32;
    if spec.enabled.translate {
        for attempt in 0..spec.max_translate_redraws {
            let (dx, dy) = draw_translation(spec, rng);
            let crop = p.crop([dx, dy, 0]);
            if crop.1.iter().any(|&v| v == 1) {
                chosen = Some((dx, dy, crop));
                redraws = attempt;
                break;
            }
        }
    }
    let (dx, dy, (image, mask, support, offset)) = match chosen {
        Some(c) => c,
        None => {
            let crop = p.crop([0; 3]);
            if !crop.1.iter().any(|&v| v == 1) {
                return Err(AugmentError::EmptyMaskUnrecoverable(p.id.clone()));
            }
            redraws = if spec.enabled.translate { spec.max_translate_redraws } else { 0 };
            (0, 0, crop)
        }
    };
    let mut transforms = Vec::new();
    if spec.enabled.translate {
        transforms.push(TransformRecord::Translate { dx, dy, redraws });
    }
    Ok(Sample {
        image,
        mask,
        support,
        provenance: Provenance { case_id: p.id.clone(), sample_index: None, crop_offset: offset, transforms },
    })
}

/// Applies the spatial stage of a plan.
pub fn apply_spatial<R: Rng + ?Sized>(s: Sample, plan: &AugmentationPlan, rng: &mut R) -> Sample {
    let mut s = s;
    let mut log = Vec::new();
    if !plan.mirror_axes.is_empty() {
        s = mirror(&s, &plan.mirror_axes);
        log.push(TransformRecord::Mirror { axes: plan.mirror_axes.clone() });
    }
    if let Some(f) = plan.scale {
        s = scale(&s, f);
        log.push(TransformRecord::Scale { factor: f });
    }
    if let Some((t, sg)) = plan.rotate {
        s = rotate(&s, t, sg);
        log.push(TransformRecord::Rotate { transversal_deg: t, sagittal_deg: sg });
    }
    if let Some(e) = plan.elastic {
        s = elastic_deform(&s, e, rng);
        log.push(TransformRecord::Elastic { sigma: e.sigma, grid_spacing: e.grid_spacing, magnitude: e.magnitude });
    }
    s.provenance.transforms.extend(log);
    s
}

pub fn apply_intensity(s: Sample, plan: &AugmentationPlan) -> Sample {
    let mut s = s;
    if let Some(sigma) = plan.blur {
        s = gaussian_blur(&s, sigma);
        s.provenance.transforms.push(TransformRecord::Blur { sigma });
    }
    if let Some(g) = plan.gamma {
        s = gamma_transform(&s, g);
        s.provenance.transforms.push(TransformRecord::Gamma { gamma: g });
    }
    s
}

/// One augmented, whitened training sample.
pub fn sample_augmented<R: Rng + ?Sized>(
    p: &PreparedCase,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<Sample, AugmentError> {
    let cropped = translate_and_crop(p, spec, rng)?;
    let plan = AugmentationPlan::draw(spec, rng);
    let spatial = apply_spatial(cropped.clone(), &plan, rng);
    let spatial = if spatial.mask.iter().any(|&v| v == 1) {
        spatial
    } else {
        let mut s = cropped;
        s.provenance.transforms.push(TransformRecord::SpatialReverted);
        s
    };
    let mut s = apply_intensity(spatial, &plan);
    whiten_supported(&mut s.image, &s.support, p.pad_value)?;
    if !spec.enabled.translate && plan == AugmentationPlan::default() {
        // Same bookkeeping as plain preprocessing.
        return Ok(s);
    }
    s.provenance.transforms.push(TransformRecord::Whiten);
    Ok(s)
}

/// Augmented sample `sample_index` of a case, drawn from its own substream.
pub fn sample_for(
    p: &PreparedCase,
    spec: &AugmentationSpec,
    stream: &RandomStream,
    sample_index: u64,
) -> Result<Sample, AugmentError> {
    let mut rng = stream.for_sample(&p.id, sample_index);
    let mut s = sample_augmented(p, spec, &mut rng)?;
    s.provenance.sample_index = Some(sample_index);
    Ok(s)
}

/// Generates `(case index, sample index)` requests on `workers` threads.
/// Output order follows the request order and is independent of `workers`.
pub fn generate_parallel(
    cases: &[PreparedCase],
    requests: &[(usize, u64)],
    spec: &AugmentationSpec,
    stream: &RandomStream,
    workers: usize,
) -> Result<Vec<Sample>, AugmentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AugmentError::InvalidSpec(format!("thread pool: {e}")))?;
    pool.install(|| requests.par_iter().map(|&(c, i)| sample_for(&cases[c], spec, stream, i)).collect())
}
