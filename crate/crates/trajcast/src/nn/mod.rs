//! Minimal differentiable kernel: dense layers, GRU cells, softmax, Gaussian
//! mixture densities, and tape-based reverse-mode gradients.
//!
//! The same tape serves gradient descent during training and the network
//! linearization needed by the online adaptation filter.

pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{dense, gmm_nll, gru_step, softmax, Activation, DenseVars, GruVars};
pub use params::{Adam, ParamFile, ParamStore};
pub use tape::{jacobian, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("non-finite values in {context}")]
    NonFinite { context: String },
    #[error("empty input to {0}")]
    EmptyInput(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter file error: {0}")]
    ParamFile(String),
}
