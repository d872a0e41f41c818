//! Raw float32 array plus JSON sidecar, used for test fixtures.
//!
//! `name.json` holds the grid; `name.raw` holds little-endian float32
//! voxels in x-fastest order (the same order as NIfTI).

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use super::{Grid, Volume, VolumeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub byte_order: String,
}

impl Sidecar {
    pub fn parse(text: &str) -> Result<Self, VolumeError> {
        let s: Sidecar =
            serde_json::from_str(text).map_err(|e| VolumeError::MalformedHeader(format!("sidecar json: {e}")))?;
        if s.dtype != "float32" {
            return Err(VolumeError::UnsupportedFormat(format!("sidecar dtype {:?}", s.dtype)));
        }
        if s.byte_order != "little" {
            return Err(VolumeError::UnsupportedFormat(format!("sidecar byte_order {:?}", s.byte_order)));
        }
        Grid::new(s.dims, s.spacing_mm, s.origin_mm).map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
        Ok(s)
    }

    pub fn voxel_count(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

/// Decodes a sidecar/payload pair already in memory.
pub fn decode(sidecar_json: &str, payload: &[u8]) -> Result<Volume, VolumeError> {
    let s = Sidecar::parse(sidecar_json)?;
    let n = s.voxel_count().ok_or_else(|| VolumeError::MalformedHeader("dims overflow".into()))?;
    if n.checked_mul(4) != Some(payload.len()) {
        return Err(VolumeError::MalformedHeader(format!(
            "raw payload has {} bytes, expected {} voxels of float32",
            payload.len(),
            n
        )));
    }
    let mut values = vec![0f32; n];
    LittleEndian::read_f32_into(payload, &mut values);
    let [nx, ny, nz] = s.dims;
    let data = Array3::from_shape_vec((nx, ny, nz).f(), values)
        .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Ok(Volume { data, spacing: s.spacing_mm, origin: s.origin_mm })
}

pub fn read(path: &Path) -> Result<Volume, VolumeError> {
    let (json, raw) = paths(path);
    let text = std::fs::read_to_string(&json).map_err(|e| VolumeError::io(&json, e))?;
    let payload = std::fs::read(&raw).map_err(|e| VolumeError::io(&raw, e))?;
    decode(&text, &payload)
}

pub fn write(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let (json, raw) = paths(path);
    let s = Sidecar {
        dims: v.dims(),
        spacing_mm: v.spacing,
        origin_mm: v.origin,
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let text = serde_json::to_string_pretty(&s).expect("sidecar serializes");
    let values: Vec<f32> = v.data.t().iter().copied().collect();
    let mut payload = vec![0u8; 4 * values.len()];
    LittleEndian::write_f32_into(&values, &mut payload);
    std::fs::write(&json, text).map_err(|e| VolumeError::io(&json, e))?;
    std::fs::write(&raw, payload).map_err(|e| VolumeError::io(&raw, e))
}
