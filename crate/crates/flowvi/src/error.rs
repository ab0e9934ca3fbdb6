//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the inference engine.
///
/// The CLI maps these onto its stable exit codes: configuration and schema
/// problems exit 2, training failures exit 3, certification failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric domain violation during forward evaluation (log of a
    /// non-positive value, division by zero, or a non-finite result).
    /// Recoverable: the trainer drops the offending Monte Carlo sample.
    #[error("numeric domain error: {0}")]
    Domain(String),

    /// An API contract was violated (node not on tape, length mismatch, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A model graph is structurally invalid (cyclic or forward-referencing
    /// parents, bad site wiring).
    #[error("invalid model: {0}")]
    Model(String),

    /// Dataset loading or validation failed.
    #[error("data error: {0}")]
    Data(String),

    /// A run configuration failed schema validation.
    #[error("config error: {0}")]
    Config(String),

    /// Training failed (every learning rate diverged, or every Monte Carlo
    /// sample of an estimate was invalid).
    #[error("training error: {0}")]
    Training(String),

    /// An equivalence certification check failed its tolerance.
    #[error("certification failed: {0}")]
    Certification(String),

    /// The finite-difference oracle detected a non-deterministic builder.
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
