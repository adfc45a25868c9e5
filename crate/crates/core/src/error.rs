//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A feature vector, logit vector, or gradient buffer has the wrong shape.
    #[error("input shape mismatch: {0}")]
    InputShape(String),

    /// Model parameters stopped being finite (NaN/inf), e.g. after divergence.
    #[error("numeric state: {0}")]
    NumericState(String),

    /// Invalid configuration value. The message names the offending field.
    #[error("configuration: {0}")]
    Config(String),

    /// Class label outside `[0, k)`.
    #[error("label out of range: {0}")]
    Label(String),

    /// A confidence table does not cover the requested example.
    #[error("confidence table: {0}")]
    ConfidenceTable(String),

    /// A vector that must be a probability distribution is not one.
    #[error("distribution: {0}")]
    Distribution(String),

    /// A class has no (or too few) examples for the requested operation.
    #[error("degenerate class: {0}")]
    DegenerateClass(String),

    /// The dataset lacks information required by the operation (e.g. group flags).
    #[error("unsupported dataset: {0}")]
    UnsupportedDataset(String),

    /// A metric is undefined on the given input (e.g. accuracy of an empty split).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A forward cache was produced by a model with a different shape.
    #[error("forward cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
