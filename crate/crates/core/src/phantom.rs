//! Synthetic spine phantoms: a column of vertebra-like blocks with disc gaps
//! and a spinal canal, one ellipsoidal lytic or sclerotic lesion, two
//! pseudo-modalities and an optional simulated second-reader mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{gaussian_filter_3d, RandomStream};
use crate::metrics::confusion_counts;
use crate::volume::{
    save_mask, save_volume, CaseEntry, DatasetManifest, LesionType, Modality, PatientCase, SegmentationMask, Volume,
    VolumeError, MANIFEST_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("second-reader calibration failed: target dice {target}, best {achieved:.4}")]
    CalibrationFailed { target: f64, achieved: f64 },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Mean tissue intensities of one pseudo-modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub background: f32,
    pub vertebra: f32,
    pub disc: f32,
    pub canal: f32,
    pub lytic: f32,
    pub sclerotic: f32,
}

impl Contrast {
    pub fn lesion(&self, t: LesionType) -> f32 {
        match t {
            LesionType::Lytic => self.lytic,
            LesionType::Sclerotic => self.sclerotic,
            LesionType::Mixed | LesionType::Unknown => 0.5 * (self.lytic + self.sclerotic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastTable {
    pub t1: Contrast,
    pub t2: Contrast,
}

impl Default for ContrastTable {
    fn default() -> Self {
        ContrastTable {
            // Fatty marrow is bright on T1; both lesion types replace it with darker tissue.
            t1: Contrast { background: 0.20, vertebra: 0.70, disc: 0.35, canal: 0.10, lytic: 0.30, sclerotic: 0.25 },
            // Fluid-rich lytic lesions and CSF are bright on T2; sclerotic bone stays dark.
            t2: Contrast { background: 0.25, vertebra: 0.45, disc: 0.60, canal: 0.90, lytic: 0.85, sclerotic: 0.12 },
        }
    }
}

impl ContrastTable {
    pub fn get(&self, m: Modality) -> &Contrast {
        match m {
            Modality::T1 => &self.t1,
            Modality::T2 => &self.t2,
        }
    }

    /// T1 lesions below marrow for both types; on T2 lytic above, sclerotic below.
    pub fn check(&self) -> Result<(), String> {
        let (t1, t2) = (&self.t1, &self.t2);
        if !(t1.lytic < t1.vertebra && t1.sclerotic < t1.vertebra) {
            return Err("T1 lesions must be hypointense to vertebra".into());
        }
        if !(t2.lytic > t2.vertebra) {
            return Err("T2 lytic lesions must be hyperintense to vertebra".into());
        }
        if !(t2.sclerotic < t2.vertebra) {
            return Err("T2 sclerotic lesions must be hypointense to vertebra".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// In-plane grid size (sagittal × vertical).
    pub dims_xy: [usize; 2],
    /// Inclusive range for the number of depth slices.
    pub depth_range: [usize; 2],
    pub spacing: [f64; 3],
    pub vertebra_count: usize,
    /// Anterior-posterior body size range, mm.
    pub body_ap_mm: [f64; 2],
    /// Vertical body height range, mm.
    pub body_height_mm: [f64; 2],
    /// Lateral body width range, mm.
    pub body_width_mm: [f64; 2],
    pub disc_gap_mm: [f64; 2],
    pub lesion_semi_axes_mm: [f64; 2],
    /// Fraction of lytic cases; the rest are sclerotic.
    pub lytic_fraction: f64,
    pub contrast: ContrastTable,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Second-reader simulation; `None` skips it.
    pub reader: Option<ReaderNoiseSpec>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims_xy: [176, 176],
            depth_range: [15, 28],
            spacing: [0.9, 0.9, 3.5],
            vertebra_count: 5,
            body_ap_mm: [28.0, 38.0],
            body_height_mm: [20.0, 27.0],
            body_width_mm: [32.0, 44.0],
            disc_gap_mm: [5.0, 8.0],
            lesion_semi_axes_mm: [6.0, 12.0],
            lytic_fraction: 2.0 / 3.0,
            contrast: ContrastTable::default(),
            noise_sigma: 0.05,
            reader: Some(ReaderNoiseSpec::default()),
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<(), PhantomError> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(PhantomError::InvalidSpec(format!("{name} = {r:?}")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims_xy.iter().any(|&d| d < 8) {
            return bad(format!("dims_xy {:?} too small", self.dims_xy));
        }
        if self.depth_range[0] < 2 || self.depth_range[0] > self.depth_range[1] {
            return bad(format!("depth_range {:?}", self.depth_range));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?}", self.spacing));
        }
        if self.vertebra_count == 0 {
            return bad("vertebra_count must be positive".into());
        }
        check_range("body_ap_mm", self.body_ap_mm)?;
        check_range("body_height_mm", self.body_height_mm)?;
        check_range("body_width_mm", self.body_width_mm)?;
        check_range("disc_gap_mm", self.disc_gap_mm)?;
        check_range("lesion_semi_axes_mm", self.lesion_semi_axes_mm)?;
        if !(0.0..=1.0).contains(&self.lytic_fraction) {
            return bad(format!("lytic_fraction {}", self.lytic_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        self.contrast.check().map_err(PhantomError::InvalidSpec)?;
        if let Some(r) = &self.reader {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReaderNoiseSpec {
    pub target_dice: f64,
    /// Upper end of the bisection bracket for the boundary displacement, mm.
    pub max_magnitude_mm: f64,
    /// Correlation length of the boundary displacement field, mm.
    pub smoothness_mm: f64,
    /// Accepted deviation from the target per mask.
    pub tolerance: f64,
}

impl Default for ReaderNoiseSpec {
    fn default() -> Self {
        ReaderNoiseSpec { target_dice: 0.794, max_magnitude_mm: 6.0, smoothness_mm: 3.0, tolerance: 0.01 }
    }
}

impl ReaderNoiseSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let ok = self.target_dice > 0.0
            && self.target_dice <= 1.0
            && self.max_magnitude_mm > 0.0
            && self.smoothness_mm > 0.0
            && self.tolerance > 0.0;
        if !ok {
            return Err(PhantomError::InvalidSpec(format!("reader noise {self:?}")));
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

/// Axis-aligned box in world millimetres, half-open.
#[derive(Debug, Clone, Copy)]
struct Block {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Block {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }
}

/// Ellipsoid with axis-aligned semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
    }
}

/// Geometry drawn for one case, kept for tests and reports.
#[derive(Debug, Clone)]
pub struct PhantomLayout {
    pub dims: [usize; 3],
    pub lesion: Ellipsoid,
    /// Index of the vertebra carrying the lesion.
    pub lesion_vertebra: usize,
    vertebrae: Vec<Block>,
    discs: Vec<Block>,
    canal: Block,
}

impl PhantomLayout {
    /// Vertebral-body membership of every voxel (lesion voxels included).
    pub fn vertebra_mask(&self, spacing: [f64; 3]) -> Array3<u8> {
        Array3::from_shape_fn(self.dims, |(x, y, z)| {
            let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
            u8::from(self.vertebrae.iter().any(|b| b.contains(p)))
        })
    }
}

fn draw_layout<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> PhantomLayout {
    let nz = rng.random_range(spec.depth_range[0]..=spec.depth_range[1]);
    let dims = [spec.dims_xy[0], spec.dims_xy[1], nz];
    let fov: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * spec.spacing[a]);
    let ap = uniform(rng, spec.body_ap_mm);
    let width = uniform(rng, spec.body_width_mm);
    let cx = fov[0] * rng.random_range(0.35..=0.5);
    let cz = fov[2] / 2.0 + rng.random_range(-2.0..=2.0);
    let (x_lo, x_hi) = (cx - ap / 2.0, cx + ap / 2.0);
    let (z_lo, z_hi) = (cz - width / 2.0, cz + width / 2.0);
    let mut vertebrae = Vec::new();
    let mut discs = Vec::new();
    let mut y = rng.random_range(-10.0..=5.0);
    for k in 0..spec.vertebra_count {
        let h = uniform(rng, spec.body_height_mm);
        vertebrae.push(Block { lo: [x_lo, y, z_lo], hi: [x_hi, y + h, z_hi] });
        y += h;
        let gap = uniform(rng, spec.disc_gap_mm);
        if k + 1 < spec.vertebra_count {
            discs.push(Block { lo: [x_lo + 1.0, y, z_lo + 1.0], hi: [x_hi - 1.0, y + gap, z_hi - 1.0] });
        }
        y += gap;
    }
    let canal_x = x_hi + 3.0;
    let canal = Block { lo: [canal_x, f64::NEG_INFINITY, cz - 8.0], hi: [canal_x + 13.0, f64::INFINITY, cz + 8.0] };

    // Prefer vertebrae whose centre is well inside the vertical field of view.
    let candidates: Vec<usize> = (0..vertebrae.len())
        .filter(|&k| {
            let c = 0.5 * (vertebrae[k].lo[1] + vertebrae[k].hi[1]);
            c > 0.2 * fov[1] && c < 0.8 * fov[1]
        })
        .collect();
    let k = if candidates.is_empty() { vertebrae.len() / 2 } else { candidates[rng.random_range(0..candidates.len())] };
    let body = vertebrae[k];
    let semi_axes: [f64; 3] = std::array::from_fn(|_| uniform(rng, spec.lesion_semi_axes_mm));
    let center: [f64; 3] = std::array::from_fn(|a| {
        let (lo, hi) = (body.lo[a], body.hi[a]);
        let shrink = (0.4 * semi_axes[a]).min(0.45 * (hi - lo));
        let c = rng.random_range(lo + shrink..=hi - shrink);
        // Keep the whole ellipsoid inside the grid when possible.
        if fov[a] > 2.0 * semi_axes[a] {
            c.clamp(semi_axes[a], fov[a] - semi_axes[a])
        } else {
            c.clamp(0.0, fov[a])
        }
    });
    PhantomLayout { dims, lesion: Ellipsoid { center, semi_axes }, lesion_vertebra: k, vertebrae, discs, canal }
}

/// Renders the noiseless tissue map of one modality.
fn render(layout: &PhantomLayout, spacing: [f64; 3], c: &Contrast, lesion_type: LesionType, mask: &Array3<u8>) -> Array3<f32> {
    Array3::from_shape_fn(layout.dims, |(x, y, z)| {
        if mask[[x, y, z]] == 1 {
            return c.lesion(lesion_type);
        }
        let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
        if layout.vertebrae.iter().any(|b| b.contains(p)) {
            c.vertebra
        } else if layout.discs.iter().any(|b| b.contains(p)) {
            c.disc
        } else if layout.canal.contains(p) {
            c.canal
        } else {
            c.background
        }
    })
}

/// One phantom case of the given lesion type. The second-reader mask is
/// attached when the spec asks for it.
pub fn generate_phantom_case<R: Rng + ?Sized>(
    spec: &PhantomSpec,
    id: &str,
    lesion_type: LesionType,
    rng: &mut R,
) -> Result<(PatientCase, PhantomLayout), PhantomError> {
    spec.validate()?;
    let layout = draw_layout(spec, rng);
    let sp = spec.spacing;
    let mask = Array3::from_shape_fn(layout.dims, |(x, y, z)| {
        u8::from(layout.lesion.contains([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]))
    });
    let mut modalities = BTreeMap::new();
    for m in [Modality::T1, Modality::T2] {
        let mut data = render(&layout, sp, spec.contrast.get(m), lesion_type, &mask);
        if spec.noise_sigma > 0.0 {
            for v in data.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += (spec.noise_sigma * n) as f32;
            }
        }
        modalities.insert(m, Volume::new(data, sp, [0.0; 3])?);
    }
    let lesion_center = mask_centroid_world(&mask, sp).expect("lesion voxels present");
    let second_reader_mask = match &spec.reader {
        Some(r) => Some(SegmentationMask::new(generate_second_reader(&mask, sp, r, rng)?, sp, [0.0; 3])?),
        None => None,
    };
    let case = PatientCase {
        id: id.to_string(),
        modalities,
        mask: SegmentationMask::new(mask, sp, [0.0; 3])?,
        lesion_center,
        lesion_type,
        second_reader_mask,
    };
    Ok((case, layout))
}

fn mask_centroid_world(mask: &Array3<u8>, spacing: [f64; 3]) -> Option<[f64; 3]> {
    crate::augment::spatial::mask_centroid(mask).map(|c| std::array::from_fn(|a| c[a] * spacing[a]))
}

/// Signed distance in mm to the mask boundary over a sub-box: negative
/// inside (distance to the nearest background voxel centre), positive outside
/// (distance to the nearest foreground voxel centre).
fn signed_distance(mask: &Array3<u8>, spacing: [f64; 3], lo: [usize; 3], hi: [usize; 3]) -> Array3<f64> {
    let dims = mask.dim();
    let dims = [dims.0, dims.1, dims.2];
    let at = |p: [isize; 3]| -> u8 {
        if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a]) {
            mask[[p[0] as usize, p[1] as usize, p[2] as usize]]
        } else {
            0
        }
    };
    // Voxels adjacent to the other label, split by side.
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    let ext = |a: usize| (lo[a].saturating_sub(1), (hi[a] + 1).min(dims[a]));
    for x in ext(0).0..ext(0).1 {
        for y in ext(1).0..ext(1).1 {
            for z in ext(2).0..ext(2).1 {
                let p = [x as isize, y as isize, z as isize];
                let v = at(p);
                let edge = (0..3).any(|a| {
                    [-1isize, 1].iter().any(|d| {
                        let mut q = p;
                        q[a] += d;
                        at(q) != v
                    })
                });
                if edge {
                    let w = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
                    if v == 1 {
                        inner.push(w);
                    } else {
                        outer.push(w);
                    }
                }
            }
        }
    }
    let nearest = |set: &[[f64; 3]], w: [f64; 3]| {
        set.iter()
            .map(|s| (0..3).map(|a| (s[a] - w[a]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    Array3::from_shape_fn((hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]), |(i, j, k)| {
        let (x, y, z) = (lo[0] + i, lo[1] + j, lo[2] + k);
        let w = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
        if mask[[x, y, z]] == 1 {
            -nearest(&outer, w)
        } else {
            nearest(&inner, w)
        }
    })
}

/// Simulates a second reader by displacing the mask boundary with a smooth
/// random field plus a global erosion/dilation offset. The field is drawn
/// once; its magnitude is bisected until the Dice against `mask` is within
/// `tolerance` of the target.
pub fn generate_second_reader<R: Rng + ?Sized>(
    mask: &Array3<u8>,
    spacing: [f64; 3],
    noise: &ReaderNoiseSpec,
    rng: &mut R,
) -> Result<Array3<u8>, PhantomError> {
    noise.validate()?;
    if !mask.iter().any(|&v| v == 1) {
        return Err(PhantomError::InvalidSpec("second reader needs a non-empty mask".into()));
    }
    if noise.target_dice >= 1.0 {
        return Ok(mask.clone());
    }
    let dims = mask.dim();
    let dims = [dims.0, dims.1, dims.2];
    let (mut flo, mut fhi) = ([usize::MAX; 3], [0usize; 3]);
    for ((x, y, z), &v) in mask.indexed_iter() {
        if v == 1 {
            for (a, i) in [x, y, z].into_iter().enumerate() {
                flo[a] = flo[a].min(i);
                fhi[a] = fhi[a].max(i + 1);
            }
        }
    }
    // The field is clamped to ±CLAMP, so boundaries move at most CLAMP·magnitude.
    const CLAMP: f64 = 2.5;
    let reach = CLAMP * noise.max_magnitude_mm;
    let lo: [usize; 3] = std::array::from_fn(|a| flo[a].saturating_sub((reach / spacing[a]).ceil() as usize + 1));
    let hi: [usize; 3] = std::array::from_fn(|a| (fhi[a] + (reach / spacing[a]).ceil() as usize + 1).min(dims[a]));
    let sd = signed_distance(mask, spacing, lo, hi);

    let mean_spacing = spacing.iter().sum::<f64>() / 3.0;
    let white = Array3::from_shape_fn(sd.dim(), |_| StandardNormal.sample(rng));
    let white32 = white.mapv(|v: f64| v as f32);
    let mut field = gaussian_filter_3d(&white32, noise.smoothness_mm / mean_spacing).mapv(|v| v as f64);
    let n = field.len() as f64;
    let mean = field.sum() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let bias: f64 = rng.random_range(-0.5..=0.5);
    field.mapv_inplace(|v| ((v - mean) / std + bias).clamp(-CLAMP, CLAMP));

    let apply = |m: f64| -> Array3<u8> {
        let mut out = mask.clone();
        for ((i, j, k), &d) in sd.indexed_iter() {
            out[[lo[0] + i, lo[1] + j, lo[2] + k]] = u8::from(d < m * field[[i, j, k]]);
        }
        out
    };
    let dice_at = |m: f64| -> (f64, Array3<u8>) {
        let out = apply(m);
        let d = confusion_counts(&out, mask).ok().and_then(|c| c.dice().ok()).unwrap_or(0.0);
        let d = if out.iter().any(|&v| v == 1) { d } else { 0.0 };
        (d, out)
    };
    let target = noise.target_dice;
    let (mut a, mut b) = (0.0, noise.max_magnitude_mm);
    let mut best = (f64::INFINITY, 1.0, mask.clone());
    for _ in 0..40 {
        let m = 0.5 * (a + b);
        let (d, out) = dice_at(m);
        if (d - target).abs() < (best.0 - target).abs() {
            best = ((d), m, out.clone());
        }
        if (d - target).abs() <= noise.tolerance && out.iter().any(|&v| v == 1) {
            return Ok(out);
        }
        if d > target {
            a = m;
        } else {
            b = m;
        }
    }
    Err(PhantomError::CalibrationFailed { target, achieved: best.0 })
}

/// Lesion types for `n` cases: `round(n · lytic_fraction)` lytic, the rest
/// sclerotic, in seeded random order.
pub fn lesion_type_plan(n: usize, lytic_fraction: f64, stream: &RandomStream) -> Vec<LesionType> {
    let n_lytic = (n as f64 * lytic_fraction).round() as usize;
    let mut types: Vec<LesionType> =
        (0..n).map(|i| if i < n_lytic { LesionType::Lytic } else { LesionType::Sclerotic }).collect();
    types.shuffle(&mut stream.substream("phantom-types", 0));
    types
}

pub fn case_id(i: usize) -> String {
    format!("case-{i:03}")
}

/// Writes `n` phantom cases as `.nii.gz` files plus `manifest.json` under `out_dir`.
pub fn generate_dataset(n: usize, spec: &PhantomSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest, PhantomError> {
    spec.validate()?;
    if n == 0 {
        return Err(PhantomError::InvalidSpec("case count must be positive".into()));
    }
    let stream = RandomStream::new(seed);
    let types = lesion_type_plan(n, spec.lytic_fraction, &stream);
    let cases_dir = out_dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| VolumeError::io(&cases_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, &t) in types.iter().enumerate() {
        let id = case_id(i);
        let mut rng = stream.substream("phantom-case", i as u64);
        let (case, _) = generate_phantom_case(spec, &id, t, &mut rng)?;
        let rel = |suffix: &str| PathBuf::from("cases").join(format!("{id}_{suffix}.nii.gz"));
        let mut modalities = BTreeMap::new();
        for (m, v) in &case.modalities {
            let p = rel(&m.tag().to_lowercase());
            save_volume(v, out_dir.join(&p))?;
            modalities.insert(*m, p);
        }
        let mask_path = rel("mask");
        save_mask(&case.mask, out_dir.join(&mask_path))?;
        let second_reader_mask = match &case.second_reader_mask {
            Some(m) => {
                let p = rel("mask_reader2");
                save_mask(m, out_dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(CaseEntry {
            id,
            modalities,
            mask: mask_path,
            lesion_center_mm: case.lesion_center,
            lesion_type: t,
            second_reader_mask,
        });
    }
    let manifest = DatasetManifest { schema_version: MANIFEST_SCHEMA_VERSION, cases: entries, base_dir: out_dir.to_path_buf() };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| VolumeError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_valid() {
        PhantomSpec::default().validate().unwrap();
        let bad = PhantomSpec { contrast: ContrastTable { t2: Contrast { lytic: 0.1, ..ContrastTable::default().t2 }, ..Default::default() }, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn type_plan_counts() {
        let s = RandomStream::new(3);
        let t = lesion_type_plan(24, 0.5, &s);
        assert_eq!(t.iter().filter(|&&v| v == LesionType::Lytic).count(), 12);
        assert_eq!(t, lesion_type_plan(24, 0.5, &s));
    }

    #[test]
    fn reader_target_one_is_identity() {
        let mut m = Array3::<u8>::zeros((10, 10, 4));
        m[[4, 4, 2]] = 1;
        m[[5, 4, 2]] = 1;
        let r = ReaderNoiseSpec { target_dice: 1.0, ..Default::default() };
        let out = generate_second_reader(&m, [1.0; 3], &r, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, m);
    }
}
