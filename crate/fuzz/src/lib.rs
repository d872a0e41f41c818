//! Entry points shared by the fuzz targets and the seed replay test.
//! Each returns whether the input was accepted; panics are the bugs.

use spineseg::config::ExperimentConfig;
use spineseg::metrics::read_records;
use spineseg::nn::checkpoint::{decode_weights, parse_architecture};
use spineseg::volume::{nifti, sidecar, DatasetManifest};

pub fn nifti_decode(data: &[u8]) -> bool {
    let _ = nifti::parse_header(data);
    nifti::decode(data).is_ok()
}

/// Sidecar JSON, a NUL byte, then the raw payload.
pub fn sidecar_decode(data: &[u8]) -> bool {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(json) = std::str::from_utf8(&data[..split]) else { return false };
    let payload = data.get(split + 1..).unwrap_or_default();
    sidecar::decode(json, payload).is_ok()
}

pub fn manifest_parse(data: &[u8]) -> bool {
    std::str::from_utf8(data).is_ok_and(|t| DatasetManifest::parse(t).is_ok())
}

pub fn config_parse(data: &[u8]) -> bool {
    std::str::from_utf8(data).is_ok_and(|t| ExperimentConfig::parse(t).is_ok())
}

pub fn records_csv(data: &[u8]) -> bool {
    read_records(data).is_ok()
}

pub fn weights_decode(data: &[u8]) -> bool {
    decode_weights(data).is_ok_and(|ts| ts.iter().all(|t| t.dims.iter().product::<usize>() == t.data.len()))
}

pub fn architecture_parse(data: &[u8]) -> bool {
    std::str::from_utf8(data).is_ok_and(|t| parse_architecture(t).is_ok())
}

pub const TARGETS: &[(&str, fn(&[u8]) -> bool)] = &[
    ("nifti_decode", nifti_decode),
    ("sidecar_decode", sidecar_decode),
    ("manifest_parse", manifest_parse),
    ("config_parse", config_parse),
    ("records_csv", records_csv),
    ("weights_decode", weights_decode),
    ("architecture_parse", architecture_parse),
];
