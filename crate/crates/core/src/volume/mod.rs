//! Grid-based image data model, volume file I/O and dataset manifests.
//!
//! All grids are axis-aligned. The stored array index order is
//! `(sagittal, vertical, depth)`, i.e. `(x, y, z)`, and world coordinates
//! are millimetres in the same array-aligned frame:
//! `world = origin + index * spacing` per axis.

mod manifest;
pub mod nifti;
pub mod sidecar;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{load_case, load_manifest, CaseEntry, DatasetManifest, MANIFEST_SCHEMA_VERSION};

/// Semantic tags of the three array axes.
pub const AXIS_LABELS: [Axis; 3] = [Axis::Sagittal, Axis::Vertical, Axis::Depth];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Sagittal,
    Vertical,
    Depth,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Vertical => 1,
            Axis::Depth => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("non-finite voxel at index ({}, {}, {})", .index[0], .index[1], .index[2])]
    NonFiniteVoxel { index: [usize; 3] },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

impl VolumeError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        VolumeError::IoFailure { path: path.display().to_string(), source }
    }
}

/// Dimensions, spacing and origin shared by an image and its masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        let grid = Grid { dims, spacing, origin };
        grid.check()?;
        Ok(grid)
    }

    fn check(&self) -> Result<(), VolumeError> {
        if self.dims.contains(&0) {
            return Err(VolumeError::InvalidGrid(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGrid(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGrid(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Continuous voxel index of a world point. Out-of-grid results are returned as-is.
    pub fn world_to_voxel(&self, point: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (point[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + index[a] * self.spacing[a])
    }

    /// Whether a continuous index rounds to a voxel inside the grid.
    pub fn contains_index(&self, index: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let r = round_half_away(index[a]);
            r >= 0 && (r as usize) < self.dims[a]
        })
    }

    /// Exact comparison of dims, and of spacing/origin to a relative 1e-6.
    pub fn same_as(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
        self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]) && close(self.origin[a], other.origin[a]))
    }
}

/// Round half away from zero.
pub fn round_half_away(v: f64) -> i64 {
    v.round() as i64
}

/// A 3D scalar image with physical grid metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        let dims = shape3(&data);
        Grid::new(dims, spacing, origin)?;
        Ok(Volume { data, spacing, origin })
    }

    pub fn dims(&self) -> [usize; 3] {
        shape3(&self.data)
    }

    pub fn grid(&self) -> Grid {
        Grid { dims: self.dims(), spacing: self.spacing, origin: self.origin }
    }

    pub fn axis_labels(&self) -> [Axis; 3] {
        AXIS_LABELS
    }

    pub fn world_to_voxel(&self, point: [f64; 3]) -> [f64; 3] {
        self.grid().world_to_voxel(point)
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        self.grid().voxel_to_world(index)
    }

    /// First non-finite voxel in x-fastest (file) order.
    pub fn first_non_finite(&self) -> Option<[usize; 3]> {
        first_non_finite(&self.data)
    }
}

pub(crate) fn first_non_finite(data: &Array3<f32>) -> Option<[usize; 3]> {
    let [nx, ny, nz] = shape3(data);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !data[[x, y, z]].is_finite() {
                    return Some([x, y, z]);
                }
            }
        }
    }
    None
}

pub(crate) fn shape3<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// Binary label map on the grid of its parent volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub data: Array3<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl SegmentationMask {
    pub fn new(data: Array3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        Grid::new(shape3(&data), spacing, origin)?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(VolumeError::InvalidGrid(format!("mask value {v} is not binary")));
        }
        Ok(SegmentationMask { data, spacing, origin })
    }

    /// Interprets a loaded volume as a mask; every value must be exactly 0 or 1.
    pub fn from_volume(v: Volume) -> Result<Self, VolumeError> {
        if let Some(bad) = v.data.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(VolumeError::InvalidGrid(format!("mask value {bad} is not binary")));
        }
        let data = v.data.mapv(|x| x as u8);
        Ok(SegmentationMask { data, spacing: v.spacing, origin: v.origin })
    }

    pub fn to_volume(&self) -> Volume {
        Volume { data: self.data.mapv(f32::from), spacing: self.spacing, origin: self.origin }
    }

    pub fn dims(&self) -> [usize; 3] {
        shape3(&self.data)
    }

    pub fn grid(&self) -> Grid {
        Grid { dims: self.dims(), spacing: self.spacing, origin: self.origin }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionType {
    Lytic,
    Sclerotic,
    Mixed,
    Unknown,
}

impl fmt::Display for LesionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LesionType::Lytic => "lytic",
            LesionType::Sclerotic => "sclerotic",
            LesionType::Mixed => "mixed",
            LesionType::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

/// One patient: co-registered modality volumes, reference mask and lesion anchor.
#[derive(Debug, Clone)]
pub struct PatientCase {
    pub id: String,
    pub modalities: BTreeMap<Modality, Volume>,
    pub mask: SegmentationMask,
    /// Lesion center `m_c` in world millimetres.
    pub lesion_center: [f64; 3],
    pub lesion_type: LesionType,
    pub second_reader_mask: Option<SegmentationMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaseViolation {
    NoModalities,
    ModalityGridMismatch { modality: Modality, reference: Modality },
    MaskGridMismatch { reference: Modality },
    SecondReaderGridMismatch,
    NonBinaryMask { second_reader: bool },
    EmptyForeground,
    CenterOutsideGrid { index: [f64; 3] },
    NonFiniteVoxel { modality: Modality, index: [usize; 3] },
    EmptyId,
}

impl fmt::Display for CaseViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseViolation::NoModalities => write!(f, "case has no modality volumes"),
            CaseViolation::ModalityGridMismatch { modality, reference } => {
                write!(f, "grid mismatch: {modality} grid differs from {reference}")
            }
            CaseViolation::MaskGridMismatch { reference } => {
                write!(f, "grid mismatch: mask grid differs from {reference}")
            }
            CaseViolation::SecondReaderGridMismatch => write!(f, "grid mismatch: second-reader mask grid differs from mask"),
            CaseViolation::NonBinaryMask { second_reader } => {
                write!(f, "{} contains non-binary values", if *second_reader { "second-reader mask" } else { "mask" })
            }
            CaseViolation::EmptyForeground => write!(f, "empty foreground: mask has no lesion voxels"),
            CaseViolation::CenterOutsideGrid { index } => {
                write!(f, "lesion center maps outside the grid at voxel index {index:?}")
            }
            CaseViolation::NonFiniteVoxel { modality, index } => write!(f, "{modality} has non-finite voxel at {index:?}"),
            CaseViolation::EmptyId => write!(f, "case id is empty"),
        }
    }
}

/// Lists every violated case invariant; an empty list means the case is valid.
pub fn validate_case(c: &PatientCase) -> Vec<CaseViolation> {
    let mut report = Vec::new();
    if c.id.is_empty() {
        report.push(CaseViolation::EmptyId);
    }
    let Some((&ref_modality, ref_volume)) = c.modalities.iter().next() else {
        report.push(CaseViolation::NoModalities);
        return report;
    };
    let ref_grid = ref_volume.grid();
    for (&m, v) in &c.modalities {
        if !v.grid().same_as(&ref_grid) {
            report.push(CaseViolation::ModalityGridMismatch { modality: m, reference: ref_modality });
        }
        if let Some(index) = v.first_non_finite() {
            report.push(CaseViolation::NonFiniteVoxel { modality: m, index });
        }
    }
    if !c.mask.grid().same_as(&ref_grid) {
        report.push(CaseViolation::MaskGridMismatch { reference: ref_modality });
    }
    if c.mask.data.iter().any(|&v| v > 1) {
        report.push(CaseViolation::NonBinaryMask { second_reader: false });
    }
    if c.mask.foreground_count() == 0 {
        report.push(CaseViolation::EmptyForeground);
    }
    let index = ref_grid.world_to_voxel(c.lesion_center);
    if !ref_grid.contains_index(index) {
        report.push(CaseViolation::CenterOutsideGrid { index });
    }
    if let Some(second) = &c.second_reader_mask {
        if !second.grid().same_as(&c.mask.grid()) {
            report.push(CaseViolation::SecondReaderGridMismatch);
        }
        if second.data.iter().any(|&v| v > 1) {
            report.push(CaseViolation::NonBinaryMask { second_reader: true });
        }
    }
    report
}

/// Reads a volume; the format is chosen by extension and verified by content.
///
/// `.nii` / `.nii.gz` are single-file NIfTI-1; `.json` or `.raw` select the
/// raw-array + JSON-sidecar format.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    let v = if name.ends_with(".json") || name.ends_with(".raw") {
        sidecar::read(path)?
    } else {
        let bytes = std::fs::read(path).map_err(|e| VolumeError::io(path, e))?;
        nifti::decode(&bytes)?
    };
    if let Some(index) = v.first_non_finite() {
        return Err(VolumeError::NonFiniteVoxel { index });
    }
    Ok(v)
}

/// Writes a volume. `.nii.gz` is gzip-compressed NIfTI-1, `.nii` uncompressed,
/// `.json`/`.raw` the sidecar format.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(VolumeError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path")));
    }
    let name = path.to_string_lossy();
    if name.ends_with(".json") || name.ends_with(".raw") {
        return sidecar::write(v, path);
    }
    let bytes = nifti::encode(v, name.ends_with(".gz"))?;
    std::fs::write(path, bytes).map_err(|e| VolumeError::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SegmentationMask, VolumeError> {
    SegmentationMask::from_volume(load_volume(path)?)
}

pub fn save_mask(m: &SegmentationMask, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    save_volume(&m.to_volume(), path)
}
