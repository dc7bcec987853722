//! From-scratch tensors, reverse-mode autograd, and two small transformer
//! models: a causal decoder with a value head (the policy) and a bidirectional
//! encoder classifier (the learned reward).
//!
//! One set of math kernels ([`kernel`]) backs both the taped training
//! forward and the no-grad inference paths, so the two agree bitwise; the
//! incremental sampling session reuses the same per-row arithmetic and is
//! tested to match the full forward exactly.

pub mod autograd;
pub mod checkpoint;
pub mod infer;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod tensor;

use std::io;
use std::path::PathBuf;

pub use autograd::{Tape, Var};
pub use infer::{
    classify, forward_lm, log_probs, perplexity, sample, LmSession, SampleOutput, SamplerConfig,
    StepOutput,
};
pub use model::{LmConfig, ParamSet, PolicyModel, RewardNet, RmConfig};
pub use optim::{Adam, AdamParams};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("backward from a node with no path to parameters")]
    DetachedBackward,
    #[error("backward target has {0} elements, expected a scalar")]
    NonScalarLoss(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },
}
