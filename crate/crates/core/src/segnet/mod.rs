//! Minimal differentiable engine for the toy U-Net, its training loop and
//! the procedural shapes dataset it is trained on.

pub mod dataset;
mod loss;
mod model;
mod network;
pub mod ops;
pub mod pnm;
mod tensor;
pub mod train;

use thiserror::Error;

pub use loss::{argmax_map, softmax, softmax_ce_loss};
pub use model::{
    model_from_bytes, read_model, weight_shape, LayerParams, ModelParams, MODEL_MAGIC,
};
pub use network::{ForwardPass, Network};
pub use tensor::Tensor;

use crate::archspec::SpecError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameters do not match the spec: {0}")]
    ParamMismatch(String),
    #[error("target class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: u8, classes: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
