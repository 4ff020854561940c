//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Coordinate or element offset outside the tensor.
    #[error("index out of range: {0}")]
    Index(String),

    /// A value passed to an operation violates its contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Graph construction or shape propagation failed.
    #[error("graph error: {0}")]
    Graph(String),

    /// A hook callback returned a tensor of the wrong shape or dtype.
    #[error("hook error: {0}")]
    Hook(String),

    /// Invalid or inconsistent injection configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Config file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Model, weights, or dataset file is malformed.
    #[error("load error: {0}")]
    Load(String),

    /// Dataset does not match the model.
    #[error("data error: {0}")]
    Data(String),

    /// Observer misuse (shape mismatch, wrong record kind).
    #[error("observer error: {0}")]
    Observer(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
