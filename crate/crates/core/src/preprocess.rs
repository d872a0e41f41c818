//! Converts a patient case into a normalized multi-channel patch: cubic depth
//! resampling, lesion-centred cropping and per-channel whitening.

use ndarray::{s, Array3, Array4, ArrayView3, Axis as NdAxis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::TransformRecord;
use crate::volume::{round_half_away, shape3, validate_case, Modality, PatientCase, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("degenerate depth: need at least 2 slices, got {0}")]
    DegenerateDepth(usize),
    #[error("lesion center {index:?} lies outside the grid {dims:?}")]
    CenterOutOfGrid { index: [f64; 3], dims: [usize; 3] },
    #[error("zero variance: channel is constant")]
    ZeroVariance,
    #[error("whitening needs at least two voxels, got {0}")]
    TooFewVoxels(usize),
    #[error("case {case} lacks modality {modality}")]
    MissingModality { case: String, modality: Modality },
    #[error("case {0}: mask is empty after cropping at the lesion center")]
    EmptyMaskAfterCrop(String),
    #[error("invalid case {case}: {reason}")]
    InvalidCase { case: String, reason: String },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_depth: usize,
    pub patch_size: [usize; 3],
    /// Channel order of the produced sample.
    pub modalities: Vec<Modality>,
    /// Value written to out-of-grid voxels after whitening.
    pub pad_value: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_depth: 64,
            patch_size: [128, 128, 64],
            modalities: vec![Modality::T1, Modality::T2],
            pad_value: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn with_modalities(modalities: &[Modality]) -> Self {
        PreprocessConfig { modalities: modalities.to_vec(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.modalities.is_empty() {
            return Err(PreprocessError::InvalidConfig("modalities must not be empty".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return Err(PreprocessError::InvalidConfig(format!("modalities lists {m} twice")));
            }
        }
        if self.target_depth < 2 {
            return Err(PreprocessError::InvalidConfig("target_depth must be at least 2".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(PreprocessError::InvalidConfig("patch_size entries must be positive".into()));
        }
        if !self.pad_value.is_finite() {
            return Err(PreprocessError::InvalidConfig("pad_value must be finite".into()));
        }
        Ok(())
    }
}

/// Case id, crop offset and the ordered log of applied transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub sample_index: Option<u64>,
    pub crop_offset: [i64; 3],
    pub transforms: Vec<TransformRecord>,
}

/// A network training/evaluation unit: `channels × X × Y × Z` image plus mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array4<f32>,
    pub mask: Array3<u8>,
    /// 1 where the voxel was sampled from inside the source grid.
    pub support: Array3<u8>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        shape3(&self.mask)
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    /// Checks the sample contract against an expected patch size.
    pub fn check_invariants(&self, patch: [usize; 3]) -> Result<(), String> {
        let sh = self.image.shape();
        if [sh[1], sh[2], sh[3]] != patch {
            return Err(format!("image spatial dims {:?} != {:?}", &sh[1..], patch));
        }
        if self.spatial_dims() != patch || shape3(&self.support) != patch {
            return Err("mask/support dims differ from the patch size".into());
        }
        if !(1..=2).contains(&sh[0]) {
            return Err(format!("channel count {} not in 1..=2", sh[0]));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err("mask not binary".into());
        }
        if self.foreground_count() == 0 {
            return Err("mask has no foreground".into());
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err("image has non-finite values".into());
        }
        Ok(())
    }

    /// The `z`-th cross-section as a `channels × X × Y` image and `X × Y` mask.
    pub fn slice(&self, z: usize) -> (ndarray::Array3<f32>, ndarray::Array2<u8>) {
        (
            self.image.index_axis(NdAxis(3), z).to_owned(),
            self.mask.index_axis(NdAxis(2), z).to_owned(),
        )
    }
}

/// Catmull-Rom weights for fractional offset `f` over neighbours `-1, 0, 1, 2`.
fn cubic_weights(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let f3 = f2 * f;
    [
        0.5 * (-f3 + 2.0 * f2 - f),
        0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
        0.5 * (-3.0 * f3 + 4.0 * f2 + f),
        0.5 * (f3 - f2),
    ]
}

/// Cubic interpolation of a 1-D profile at continuous position `t ∈ [0, n-1]`.
///
/// Neighbours beyond the ends are linearly extrapolated, so linear profiles
/// are reproduced exactly up to the boundary.
pub fn cubic_sample(profile: &[f64], t: f64) -> f64 {
    let n = profile.len();
    debug_assert!(n >= 2);
    let at = |i: isize| -> f64 {
        if i < 0 {
            2.0 * profile[0] - profile[1]
        } else if i as usize >= n {
            2.0 * profile[n - 1] - profile[n - 2]
        } else {
            profile[i as usize]
        }
    };
    let i = (t.floor() as isize).clamp(0, n as isize - 2);
    let f = t - i as f64;
    let w = cubic_weights(f);
    w[0] * at(i - 1) + w[1] * at(i) + w[2] * at(i + 1) + w[3] * at(i + 2)
}

fn depth_positions(n_in: usize, target: usize) -> Vec<f64> {
    let step = (n_in - 1) as f64 / (target - 1) as f64;
    (0..target).map(|j| j as f64 * step).collect()
}

/// Resamples the depth axis to `target` slices with cubic interpolation.
/// Endpoints are preserved; depth spacing scales by `(n_in - 1) / (target - 1)`.
pub fn resample_depth(v: &Volume, target: usize) -> Result<Volume, PreprocessError> {
    let [nx, ny, nz] = v.dims();
    if nz < 2 {
        return Err(PreprocessError::DegenerateDepth(nz));
    }
    if target < 2 {
        return Err(PreprocessError::DegenerateDepth(target));
    }
    let positions = depth_positions(nz, target);
    let mut out = Array3::<f32>::zeros((nx, ny, target));
    let mut profile = vec![0f64; nz];
    for x in 0..nx {
        for y in 0..ny {
            for (z, p) in profile.iter_mut().enumerate() {
                *p = v.data[[x, y, z]] as f64;
            }
            for (j, &t) in positions.iter().enumerate() {
                out[[x, y, j]] = cubic_sample(&profile, t) as f32;
            }
        }
    }
    let mut spacing = v.spacing;
    spacing[2] *= (nz - 1) as f64 / (target - 1) as f64;
    Ok(Volume { data: out, spacing, origin: v.origin })
}

/// Nearest-neighbour depth resampling for label maps.
pub fn resample_mask_depth(mask: &Array3<u8>, target: usize) -> Result<Array3<u8>, PreprocessError> {
    let [nx, ny, nz] = shape3(mask);
    if nz < 2 {
        return Err(PreprocessError::DegenerateDepth(nz));
    }
    if target < 2 {
        return Err(PreprocessError::DegenerateDepth(target));
    }
    let src: Vec<usize> =
        depth_positions(nz, target).iter().map(|&t| (round_half_away(t).max(0) as usize).min(nz - 1)).collect();
    Ok(Array3::from_shape_fn((nx, ny, target), |(x, y, j)| mask[[x, y, src[j]]]))
}

/// Copies a `size` box starting at `offset` (may be negative or overhanging),
/// filling out-of-grid voxels with `pad`. Returns the patch and its support map.
pub fn crop_array<T: Copy>(data: ArrayView3<T>, offset: [i64; 3], size: [usize; 3], pad: T) -> (Array3<T>, Array3<u8>) {
    let dims = [data.shape()[0], data.shape()[1], data.shape()[2]];
    let mut out = Array3::from_elem((size[0], size[1], size[2]), pad);
    let mut support = Array3::zeros((size[0], size[1], size[2]));
    // Overlap of [offset, offset+size) with [0, dims) per axis.
    let mut src = [(0usize, 0usize); 3];
    let mut dst = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = offset[a].max(0);
        let hi = (offset[a] + size[a] as i64).min(dims[a] as i64);
        if hi <= lo {
            return (out, support);
        }
        src[a] = (lo as usize, hi as usize);
        dst[a] = ((lo - offset[a]) as usize, (hi - offset[a]) as usize);
    }
    out.slice_mut(s![dst[0].0..dst[0].1, dst[1].0..dst[1].1, dst[2].0..dst[2].1])
        .assign(&data.slice(s![src[0].0..src[0].1, src[1].0..src[1].1, src[2].0..src[2].1]));
    support.slice_mut(s![dst[0].0..dst[0].1, dst[1].0..dst[1].1, dst[2].0..dst[2].1]).fill(1);
    (out, support)
}

/// Voxel index the crop is centred on: `round(world_to_voxel(center))`.
pub fn center_index(v: &Volume, center: [f64; 3]) -> Result<[i64; 3], PreprocessError> {
    let grid = v.grid();
    let index = grid.world_to_voxel(center);
    if !grid.contains_index(index) {
        return Err(PreprocessError::CenterOutOfGrid { index, dims: grid.dims });
    }
    Ok(index.map(round_half_away))
}

/// Crop start for a box of `size` centred at `center`.
pub fn crop_offset(center: [i64; 3], size: [usize; 3]) -> [i64; 3] {
    std::array::from_fn(|a| center[a] - (size[a] / 2) as i64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropResult {
    pub patch: Array3<f32>,
    pub support: Array3<u8>,
    pub offset: [i64; 3],
}

/// Lesion-centred crop of a fixed size, padding out-of-grid regions with `pad`.
pub fn crop_patch(v: &Volume, center: [f64; 3], size: [usize; 3], pad: f32) -> Result<CropResult, PreprocessError> {
    let c = center_index(v, center)?;
    let offset = crop_offset(c, size);
    let (patch, support) = crop_array(v.data.view(), offset, size, pad);
    Ok(CropResult { patch, support, offset })
}

fn mean_std(values: impl Iterator<Item = f32>) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0f64;
    let mut sum_sq = 0f64;
    let vals: Vec<f64> = values.map(f64::from).collect();
    for &v in &vals {
        n += 1;
        sum += v;
    }
    let mean = if n > 0 { sum / n as f64 } else { 0.0 };
    for &v in &vals {
        sum_sq += (v - mean) * (v - mean);
    }
    let var = if n > 0 { sum_sq / n as f64 } else { 0.0 };
    (mean, var.sqrt(), n)
}

fn standardize(values: &mut [f32], support: Option<&[u8]>, pad: f32) -> Result<(), PreprocessError> {
    let (mean, std, n) = match support {
        Some(s) => mean_std(values.iter().zip(s).filter(|(_, &m)| m == 1).map(|(&v, _)| v)),
        None => mean_std(values.iter().copied()),
    };
    if n < 2 {
        return Err(PreprocessError::TooFewVoxels(n));
    }
    if !(std > 1e-6 * mean.abs().max(1.0)) {
        return Err(PreprocessError::ZeroVariance);
    }
    match support {
        Some(s) => {
            for (v, &m) in values.iter_mut().zip(s) {
                *v = if m == 1 { ((*v as f64 - mean) / std) as f32 } else { pad };
            }
        }
        None => {
            for v in values.iter_mut() {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
    Ok(())
}

/// Zero-mean, unit-variance standardization of each channel over the whole patch.
pub fn whiten(image: &Array4<f32>) -> Result<Array4<f32>, PreprocessError> {
    let mut out = image.as_standard_layout().into_owned();
    for mut ch in out.outer_iter_mut() {
        standardize(ch.as_slice_mut().expect("standard layout"), None, 0.0)?;
    }
    Ok(out)
}

/// Whitening with statistics over supported voxels only; unsupported voxels become `pad`.
pub fn whiten_supported(image: &mut Array4<f32>, support: &Array3<u8>, pad: f32) -> Result<(), PreprocessError> {
    let support = support.as_standard_layout();
    let s = support.as_slice().expect("standard layout");
    for mut ch in image.outer_iter_mut() {
        standardize(ch.as_slice_mut().expect("standard layout"), Some(s), pad)?;
    }
    Ok(())
}

/// Depth-resampled channels and mask of a case, ready for (augmented) cropping.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    pub modalities: Vec<Modality>,
    /// One resampled array per modality, in config order.
    pub channels: Vec<Array3<f32>>,
    pub mask: Array3<u8>,
    /// Rounded voxel index of the lesion center on the resampled grid.
    pub center: [i64; 3],
    pub patch_size: [usize; 3],
    pub pad_value: f32,
}

impl PreparedCase {
    pub fn dims(&self) -> [usize; 3] {
        shape3(&self.mask)
    }

    /// Crops all channels and the mask at `center + shift`; image values are raw (not whitened).
    pub fn crop(&self, shift: [i64; 3]) -> (Array4<f32>, Array3<u8>, Array3<u8>, [i64; 3]) {
        let c: [i64; 3] = std::array::from_fn(|a| self.center[a] + shift[a]);
        let offset = crop_offset(c, self.patch_size);
        let [px, py, pz] = self.patch_size;
        let mut image = Array4::zeros((self.channels.len(), px, py, pz));
        let mut support = Array3::zeros((px, py, pz));
        for (k, ch) in self.channels.iter().enumerate() {
            let (patch, sup) = crop_array(ch.view(), offset, self.patch_size, 0.0);
            image.index_axis_mut(NdAxis(0), k).assign(&patch);
            support = sup;
        }
        let (mask, _) = crop_array(self.mask.view(), offset, self.patch_size, 0u8);
        (image, mask, support, offset)
    }
}

/// Resamples every requested modality and the mask to the target depth.
pub fn prepare_case(c: &PatientCase, cfg: &PreprocessConfig) -> Result<PreparedCase, PreprocessError> {
    cfg.validate()?;
    let report = validate_case(c);
    if !report.is_empty() {
        let reason = report.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(PreprocessError::InvalidCase { case: c.id.clone(), reason });
    }
    let mut channels = Vec::with_capacity(cfg.modalities.len());
    let mut reference: Option<Volume> = None;
    for &m in &cfg.modalities {
        let v = c
            .modalities
            .get(&m)
            .ok_or_else(|| PreprocessError::MissingModality { case: c.id.clone(), modality: m })?;
        let r = resample_depth(v, cfg.target_depth)?;
        channels.push(r.data.clone());
        reference.get_or_insert(r);
    }
    let reference = reference.expect("modalities non-empty");
    let center = center_index(&reference, c.lesion_center)?;
    let mask = resample_mask_depth(&c.mask.data, cfg.target_depth)?;
    Ok(PreparedCase {
        id: c.id.clone(),
        modalities: cfg.modalities.clone(),
        channels,
        mask,
        center,
        patch_size: cfg.patch_size,
        pad_value: cfg.pad_value,
    })
}

/// Resample → crop at `m_c` → whiten, per modality; the mask follows with
/// nearest-neighbour resampling and the identical crop.
pub fn preprocess_case(c: &PatientCase, cfg: &PreprocessConfig) -> Result<Sample, PreprocessError> {
    let prepared = prepare_case(c, cfg)?;
    preprocess_prepared(&prepared)
}

pub fn preprocess_prepared(p: &PreparedCase) -> Result<Sample, PreprocessError> {
    let (mut image, mask, support, offset) = p.crop([0; 3]);
    if !mask.iter().any(|&v| v == 1) {
        return Err(PreprocessError::EmptyMaskAfterCrop(p.id.clone()));
    }
    whiten_supported(&mut image, &support, p.pad_value)?;
    Ok(Sample {
        image,
        mask,
        support,
        provenance: Provenance { case_id: p.id.clone(), sample_index: None, crop_offset: offset, transforms: Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn depth_ramp(nz: usize) -> Volume {
        let data = Array3::from_shape_fn((3, 2, nz), |(x, _, z)| 2.5 * z as f32 - 1.0 + x as f32);
        Volume::new(data, [0.5, 0.5, 3.3], [0.0; 3]).unwrap()
    }

    #[test]
    fn resample_reproduces_linear_ramp() {
        for nz in [2, 3, 15, 28] {
            let v = depth_ramp(nz);
            let r = resample_depth(&v, 64).unwrap();
            assert_eq!(r.dims(), [3, 2, 64]);
            let step = (nz - 1) as f64 / 63.0;
            for x in 0..3 {
                for j in 0..64 {
                    let expect = 2.5 * j as f64 * step - 1.0 + x as f64;
                    assert_abs_diff_eq!(r.data[[x, 1, j]] as f64, expect, epsilon = 1e-5);
                }
            }
            assert_abs_diff_eq!(r.spacing[2], 3.3 * step, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_identity_and_degenerate() {
        let v = depth_ramp(64);
        assert_eq!(resample_depth(&v, 64).unwrap().data, v.data);
        assert_eq!(resample_depth(&depth_ramp(1), 64), Err(PreprocessError::DegenerateDepth(1)));
    }

    #[test]
    fn mask_resampling_stays_binary() {
        let m = Array3::from_shape_fn((2, 2, 15), |(_, _, z)| u8::from((4..9).contains(&z)));
        let r = resample_mask_depth(&m, 64).unwrap();
        assert!(r.iter().all(|&v| v <= 1));
        assert!(r.iter().any(|&v| v == 1));
    }

    #[test]
    fn whiten_two_point() {
        let img = Array4::from_shape_fn((1, 2, 2, 1), |(_, x, _, _)| if x == 0 { 0.0 } else { 2.0 });
        let w = whiten(&img).unwrap();
        assert!(w.iter().all(|&v| v == -1.0 || v == 1.0));
        assert_eq!(whiten(&Array4::from_elem((1, 2, 2, 2), 3.0)), Err(PreprocessError::ZeroVariance));
        assert_eq!(whiten(&Array4::from_elem((1, 1, 1, 1), 3.0)), Err(PreprocessError::TooFewVoxels(1)));
    }

    #[test]
    fn interior_crop_has_no_padding() {
        let v = Volume::new(Array3::from_elem((256, 256, 64), 1.0), [1.0; 3], [0.0; 3]).unwrap();
        let c = crop_patch(&v, [128.0, 128.0, 32.0], [128, 128, 64], 0.0).unwrap();
        assert_eq!(c.offset, [64, 64, 0]);
        assert!(c.support.iter().all(|&s| s == 1));
        assert!(matches!(
            crop_patch(&v, [-10.0, 0.0, 0.0], [128, 128, 64], 0.0),
            Err(PreprocessError::CenterOutOfGrid { .. })
        ));
    }
}
