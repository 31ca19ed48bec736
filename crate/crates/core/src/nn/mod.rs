//! Feed-forward network engine: dense and 3x3 convolution layers, softmax
//! cross-entropy, mini-batch SGD, and penultimate-layer features.

mod arch;
mod compute;
pub mod format;
mod gradcheck;
mod model;
mod tensor;
mod train;

use thiserror::Error;

pub use arch::{Activation, Architecture, LayerSpec, Shape};
pub use gradcheck::{gradient_check, MAX_PARAMS as GRADCHECK_MAX_PARAMS, STEP as GRADCHECK_STEP};
pub use model::{argmax, Model, ModelMetadata, Samples};
pub use tensor::Tensor;
pub use train::{train, SliceSamples, TrainConfig};

pub(crate) use train::run_sgd;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("label {label} of sample {index} outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
