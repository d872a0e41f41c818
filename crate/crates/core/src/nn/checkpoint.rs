//! Checkpoint directory: `architecture.json` plus a `weights.bin` archive of
//! named little-endian f32 tensors.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::unet::{ModelConfig, UNet};
use super::NnError;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SSEGW001";
pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MAX_TENSORS: u32 = 4096;
const MAX_NAME: usize = 256;
const MAX_DIMS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
}

impl Architecture {
    pub const FORMAT: &'static str = "spineseg-unet";
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_weights(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.write_u32::<LittleEndian>(tensors.len() as u32).expect("vec write");
    for t in tensors {
        out.write_u16::<LittleEndian>(t.name.len() as u16).expect("vec write");
        out.extend_from_slice(t.name.as_bytes());
        out.write_u8(t.dims.len() as u8).expect("vec write");
        for &d in &t.dims {
            out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        for &v in &t.data {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<NamedTensor>, NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    let eof = |_| bad("truncated weights archive");
    if bytes.len() < 12 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(bad("not a weights archive (bad magic)"));
    }
    let mut r = Cursor::new(&bytes[8..]);
    let count = r.read_u32::<LittleEndian>().map_err(eof)?;
    if count > MAX_TENSORS {
        return Err(bad("too many tensors"));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(bad("invalid tensor name length"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let nd = r.read_u8().map_err(eof)?;
        if nd == 0 || nd > MAX_DIMS {
            return Err(bad("invalid tensor rank"));
        }
        let mut dims = Vec::with_capacity(nd as usize);
        let mut n: usize = 1;
        for _ in 0..nd {
            let d = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            n = n.checked_mul(d).ok_or_else(|| bad("tensor size overflow"))?;
            dims.push(d);
        }
        let remaining = bytes.len() - 8 - r.position() as usize;
        if n.checked_mul(4).is_none_or(|b| b > remaining) {
            return Err(bad("truncated weights archive"));
        }
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
        out.push(NamedTensor { name, dims, data });
    }
    if (r.position() as usize) != bytes.len() - 8 {
        return Err(bad("trailing bytes after weights"));
    }
    Ok(out)
}

/// All parameters and buffers of a network, in a fixed order.
pub fn export_tensors<T: Real>(net: &UNet<T>) -> Vec<NamedTensor> {
    let mut copy = net.clone();
    copy.params_mut()
        .into_iter()
        .map(|p| NamedTensor { name: p.name, dims: p.dims, data: p.value.iter().map(|v| v.f64() as f32).collect() })
        .collect()
}

/// Rebuilds a network from its configuration and a tensor list. Every tensor
/// must be present exactly once with matching dims.
pub fn import_tensors<T: Real>(config: ModelConfig, tensors: Vec<NamedTensor>) -> Result<UNet<T>, NnError> {
    let config = ModelConfig { param_budget: None, ..config };
    let mut net = UNet::<T>::new(config)?;
    let mut by_name: std::collections::HashMap<String, NamedTensor> = std::collections::HashMap::new();
    for t in tensors {
        let name = t.name.clone();
        if by_name.insert(name.clone(), t).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    for p in net.params_mut() {
        let t = by_name.remove(&p.name).ok_or_else(|| NnError::Checkpoint(format!("missing tensor {}", p.name)))?;
        if t.dims != p.dims {
            return Err(NnError::Checkpoint(format!("tensor {} has dims {:?}, expected {:?}", p.name, t.dims, p.dims)));
        }
        for (dst, src) in p.value.iter_mut().zip(&t.data) {
            *dst = T::of(*src as f64);
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(NnError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &UNet<T>, dir: &Path) -> Result<(), NnError> {
    std::fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
    let arch = Architecture { format: Architecture::FORMAT.into(), version: 1, model: net.config().clone() };
    let json = serde_json::to_string_pretty(&arch).expect("architecture serializes");
    let a = dir.join(ARCHITECTURE_FILE);
    std::fs::write(&a, json).map_err(|e| NnError::io(&a, e))?;
    let w = dir.join(WEIGHTS_FILE);
    std::fs::write(&w, encode_weights(&export_tensors(net))).map_err(|e| NnError::io(&w, e))
}

pub fn parse_architecture(text: &str) -> Result<Architecture, NnError> {
    let arch: Architecture = serde_json::from_str(text).map_err(|e| NnError::Checkpoint(format!("architecture.json: {e}")))?;
    if arch.format != Architecture::FORMAT || arch.version != 1 {
        return Err(NnError::Checkpoint(format!("unsupported checkpoint format {} v{}", arch.format, arch.version)));
    }
    Ok(arch)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<UNet<T>, NnError> {
    let a = dir.join(ARCHITECTURE_FILE);
    let text = std::fs::read_to_string(&a).map_err(|e| NnError::io(&a, e))?;
    let arch = parse_architecture(&text)?;
    let w = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&w).map_err(|e| NnError::io(&w, e))?;
    let mut net = import_tensors(arch.model.clone(), decode_weights(&bytes)?)?;
    net.set_config(arch.model);
    Ok(net)
}
