//! A small CPU neural-network engine: 2-D/3-D convolutions via im2col and
//! GEMM, batch normalization, the U-Net, Adam and checkpointing.

pub mod checkpoint;
pub mod layers;
pub mod optim;
mod real;
pub mod tensor;
pub mod unet;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{Adam, AdamConfig};
pub use real::Real;
pub use tensor::Tensor;
pub use unet::{Dimensionality, ForwardCache, ModelConfig, UNet};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter count {count} is more than 15% away from the budget {budget}")]
    BudgetViolation { count: usize, budget: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl NnError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        NnError::Io { path: path.to_path_buf(), source }
    }
}
