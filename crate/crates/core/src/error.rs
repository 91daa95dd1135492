use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown label(s): {}", .0.join(", "))]
    UnknownLabel(Vec<String>),
    #[error("invalid {scheme} sequence at index {index}: {detail}")]
    IllegalSequence {
        scheme: &'static str,
        index: usize,
        detail: String,
    },
    #[error("sequence length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss in {phase} at epoch {epoch}, batch sentences {batch:?}")]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        batch: Vec<usize>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
