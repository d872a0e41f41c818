//! Single-file NIfTI-1 (`.nii`, optionally gzip-compressed) reader and writer.
//!
//! Only axis-aligned 3D grids are accepted: a header whose sform has
//! off-diagonal terms, or whose qform quaternion is not the identity, is
//! rejected as oblique.

use std::io::{Read, Write};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::{Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const NIFTI2_HEADER_SIZE: i32 = 540;
/// Decompressed payloads beyond this are refused.
const MAX_DECOMPRESSED: u64 = 4 << 30;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    UInt8,
    Int8,
    Int16,
    UInt16,
    Int32,
    UInt32,
    Float32,
    Float64,
}

impl DataType {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::UInt8,
            4 => DataType::Int16,
            8 => DataType::Int32,
            16 => DataType::Float32,
            64 => DataType::Float64,
            256 => DataType::Int8,
            512 => DataType::UInt16,
            768 => DataType::UInt32,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DataType::UInt8 | DataType::Int8 => 1,
            DataType::Int16 | DataType::UInt16 => 2,
            DataType::Int32 | DataType::UInt32 | DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

/// The header fields this crate understands.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub big_endian: bool,
    pub dims: [usize; 3],
    pub datatype: DataType,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

fn malformed(msg: impl Into<String>) -> VolumeError {
    VolumeError::MalformedHeader(msg.into())
}

fn unsupported(msg: impl Into<String>) -> VolumeError {
    VolumeError::UnsupportedFormat(msg.into())
}

/// Parses the fixed 348-byte header.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, VolumeError> {
    if bytes.len() < HEADER_SIZE {
        if bytes.len() >= 4
            && (LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 || BigEndian::read_i32(bytes) == HEADER_SIZE as i32)
        {
            return Err(malformed(format!("truncated header: {} of {HEADER_SIZE} bytes", bytes.len())));
        }
        return Err(unsupported("not a NIfTI-1 file"));
    }
    let le = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
    let be = BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
    let big_endian = if le == HEADER_SIZE as i32 {
        false
    } else if be == HEADER_SIZE as i32 {
        true
    } else if le == NIFTI2_HEADER_SIZE || be == NIFTI2_HEADER_SIZE {
        return Err(unsupported("NIfTI-2 headers are not supported"));
    } else {
        return Err(unsupported(format!("sizeof_hdr {le} is not {HEADER_SIZE}")));
    };
    if big_endian {
        parse_fields::<BigEndian>(bytes, true)
    } else {
        parse_fields::<LittleEndian>(bytes, false)
    }
}

fn parse_fields<E: ByteOrder>(b: &[u8], big_endian: bool) -> Result<NiftiHeader, VolumeError> {
    let magic = &b[offsets::MAGIC..offsets::MAGIC + 4];
    if magic == MAGIC_PAIR {
        return Err(unsupported("header/image pair (.hdr/.img) files are not supported"));
    }
    if magic != MAGIC_SINGLE {
        return Err(malformed(format!("bad magic {magic:?}")));
    }

    let dim: [i16; 8] = std::array::from_fn(|i| E::read_i16(&b[offsets::DIM + 2 * i..]));
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(malformed(format!("dim[0] = {ndim} outside 1..=7")));
    }
    let ndim = ndim as usize;
    let mut dims = [1usize; 3];
    for axis in 0..ndim {
        let d = dim[axis + 1];
        if d < 1 {
            return Err(malformed(format!("dim[{}] = {d} must be at least 1", axis + 1)));
        }
        if axis < 3 {
            dims[axis] = d as usize;
        } else if d != 1 {
            return Err(unsupported(format!("{ndim}-dimensional volumes with dim[{}] = {d}", axis + 1)));
        }
    }

    let code = E::read_i16(&b[offsets::DATATYPE..]);
    let datatype = DataType::from_code(code).ok_or_else(|| unsupported(format!("datatype code {code}")))?;
    let bitpix = E::read_i16(&b[offsets::BITPIX..]);
    if bitpix as i32 != 8 * datatype.size() as i32 {
        return Err(malformed(format!("bitpix {bitpix} inconsistent with datatype {code}")));
    }

    let pixdim: [f32; 8] = std::array::from_fn(|i| E::read_f32(&b[offsets::PIXDIM + 4 * i..]));
    let mut spacing = [1.0f64; 3];
    for axis in 0..3 {
        let p = pixdim[axis + 1].abs() as f64;
        if axis < ndim {
            if !(p.is_finite() && p > 0.0) {
                return Err(malformed(format!("pixdim[{}] = {} is not a positive spacing", axis + 1, pixdim[axis + 1])));
            }
            spacing[axis] = p;
        } else if p.is_finite() && p > 0.0 {
            spacing[axis] = p;
        }
    }

    let vox_offset = E::read_f32(&b[offsets::VOX_OFFSET..]);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(malformed(format!("vox_offset {vox_offset}")));
    }
    let scl_slope = E::read_f32(&b[offsets::SCL_SLOPE..]);
    let scl_inter = E::read_f32(&b[offsets::SCL_INTER..]);
    if !scl_slope.is_finite() || !scl_inter.is_finite() {
        return Err(malformed("non-finite intensity scaling"));
    }

    let qform_code = E::read_i16(&b[offsets::QFORM_CODE..]);
    let sform_code = E::read_i16(&b[offsets::SFORM_CODE..]);
    let origin = if sform_code > 0 {
        let rows: [[f32; 4]; 3] =
            std::array::from_fn(|r| std::array::from_fn(|c| E::read_f32(&b[offsets::SROW_X + 16 * r + 4 * c..])));
        let scale = (0..3).map(|i| rows[i][i].abs()).fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().take(3).enumerate() {
                if !v.is_finite() {
                    return Err(malformed("non-finite sform"));
                }
                if r != c && v.abs() > 1e-6 * scale {
                    return Err(unsupported("oblique sform affine"));
                }
            }
            if !row[3].is_finite() {
                return Err(malformed("non-finite sform offset"));
            }
        }
        [rows[0][3] as f64, rows[1][3] as f64, rows[2][3] as f64]
    } else if qform_code > 0 {
        let q: [f32; 3] = std::array::from_fn(|i| E::read_f32(&b[offsets::QUATERN_B + 4 * i..]));
        let off: [f32; 3] = std::array::from_fn(|i| E::read_f32(&b[offsets::QOFFSET_X + 4 * i..]));
        if q.iter().chain(off.iter()).any(|v| !v.is_finite()) {
            return Err(malformed("non-finite qform"));
        }
        if q.iter().any(|v| v.abs() > 1e-6) {
            return Err(unsupported("rotated (oblique) qform"));
        }
        off.map(f64::from)
    } else {
        [0.0; 3]
    };

    Ok(NiftiHeader {
        big_endian,
        dims,
        datatype,
        spacing,
        origin,
        vox_offset: vox_offset as usize,
        scl_slope,
        scl_inter,
    })
}

/// Decodes a complete file image, gzip-compressed or not.
pub fn decode(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .take(MAX_DECOMPRESSED)
            .read_to_end(&mut raw)
            .map_err(|e| malformed(format!("gzip stream: {e}")))?;
        return decode_raw(&raw);
    }
    decode_raw(bytes)
}

fn decode_raw(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let h = parse_header(bytes)?;
    let n = h.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| malformed("dims overflow"))?;
    let need = n.checked_mul(h.datatype.size()).and_then(|s| s.checked_add(h.vox_offset));
    match need {
        Some(need) if need <= bytes.len() => {}
        _ => return Err(malformed(format!("data section truncated: {} bytes for {n} voxels", bytes.len()))),
    }
    let payload = &bytes[h.vox_offset..];
    let mut values = if h.big_endian { read_values::<BigEndian>(payload, h.datatype, n) } else { read_values::<LittleEndian>(payload, h.datatype, n) };
    if h.scl_slope != 0.0 && !(h.scl_slope == 1.0 && h.scl_inter == 0.0) {
        for v in &mut values {
            *v = *v * h.scl_slope + h.scl_inter;
        }
    }
    // File order is x fastest.
    let data = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]).f(), values)
        .map_err(|e| malformed(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Ok(Volume { data, spacing: h.spacing, origin: h.origin })
}

fn read_values<E: ByteOrder>(p: &[u8], dt: DataType, n: usize) -> Vec<f32> {
    let s = dt.size();
    (0..n)
        .map(|i| {
            let c = &p[i * s..];
            match dt {
                DataType::UInt8 => c[0] as f32,
                DataType::Int8 => c[0] as i8 as f32,
                DataType::Int16 => E::read_i16(c) as f32,
                DataType::UInt16 => E::read_u16(c) as f32,
                DataType::Int32 => E::read_i32(c) as f32,
                DataType::UInt32 => E::read_u32(c) as f32,
                DataType::Float32 => E::read_f32(c),
                DataType::Float64 => E::read_f64(c) as f32,
            }
        })
        .collect()
}

/// Serializes as little-endian float32 NIfTI-1 with an axis-aligned sform and qform.
pub fn encode(v: &Volume, gzip: bool) -> Result<Vec<u8>, VolumeError> {
    let [nx, ny, nz] = v.dims();
    for (axis, &d) in v.dims().iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(unsupported(format!("dimension {axis} = {d} exceeds NIfTI-1 limits")));
        }
    }
    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + 4 * nx * ny * nz];
    {
        let h = &mut out[..HEADER_SIZE];
        LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
        let dim = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut h[offsets::DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut h[offsets::DATATYPE..], 16);
        LittleEndian::write_i16(&mut h[offsets::BITPIX..], 32);
        let pixdim = [1.0f32, v.spacing[0] as f32, v.spacing[1] as f32, v.spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * i..], *p);
        }
        LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], DEFAULT_VOX_OFFSET as f32);
        LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
        LittleEndian::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
        h[offsets::XYZT_UNITS] = 2; // millimetres
        let descrip = b"spineseg";
        h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
        LittleEndian::write_i16(&mut h[offsets::QFORM_CODE..], 1);
        LittleEndian::write_i16(&mut h[offsets::SFORM_CODE..], 1);
        for i in 0..3 {
            LittleEndian::write_f32(&mut h[offsets::QOFFSET_X + 4 * i..], v.origin[i] as f32);
            for c in 0..4 {
                let val = if c == i {
                    v.spacing[i] as f32
                } else if c == 3 {
                    v.origin[i] as f32
                } else {
                    0.0
                };
                LittleEndian::write_f32(&mut h[offsets::SROW_X + 16 * i + 4 * c..], val);
            }
        }
        h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
    }
    let mut pos = DEFAULT_VOX_OFFSET;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                LittleEndian::write_f32(&mut out[pos..], v.data[[x, y, z]]);
                pos += 4;
            }
        }
    }
    if !gzip {
        return Ok(out);
    }
    // GzEncoder writes mtime 0, so output is byte-deterministic.
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&out).and_then(|_| enc.finish()).map_err(|e| malformed(format!("gzip: {e}")))
}
