//! Desk-scale multimodal contrastive learning with a shared transformer encoder.
//!
//! One transformer parameter stack serves both the image and the text modality.
//! Modality identity is injected either as a learned feature vector appended to
//! every token embedding or as a learned token prepended to the sequence, and
//! optional modality-specific layers can be placed before or after the shared
//! stack. Training uses the symmetric contrastive objective with a learnable
//! temperature; evaluation is cross-modal retrieval (Recall@k in both
//! directions).
//!
//! Everything runs on a small built-in tensor library with reverse-mode
//! automatic differentiation ([`tape::Tape`]), so the whole pipeline is
//! self-contained, single-threaded and deterministic for a fixed seed.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod experiments;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod runfile;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;

/// Crate-wide error type.
///
/// Variants follow the failure classes of the public contracts: shape
/// disagreements name both shapes, domain violations name the operation,
/// configuration and input problems carry a field-level message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
