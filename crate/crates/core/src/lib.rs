//! Spinal metastasis segmentation: volume I/O, preprocessing, augmentation,
//! a U-Net with its own training engine, Tversky loss, metrics, synthetic
//! phantoms, cross-validation and reporting.

pub mod augment;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod report;
pub mod trainer;
pub mod volume;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
