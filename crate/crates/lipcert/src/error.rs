//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result<T>`]. Variants are grouped
//! by origin: shape/argument validation, numeric preconditions, model file
//! I/O, dataset I/O, and training-time aborts.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between a layer/operation and its input.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value (NaN/inf) reached a place that requires finite input.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Stochastic sort estimation requires nonnegative post-activation values.
    #[error(
        "stochastic mode requires nonnegative activation outputs; found {value} at layer {layer}"
    )]
    NegativeStochasticInput { layer: usize, value: f64 },

    /// A mask plan was required (stochastic mode) but missing for a layer.
    #[error("missing mask for sort layer {0} in stochastic mode")]
    MissingMask(usize),

    /// Mean-shift normalization was used at inference before its running mean
    /// was finalized.
    #[error("mean-shift layer {0} has no finalized running mean")]
    UnfinalizedRunningMean(usize),

    /// Model file does not start with the expected magic bytes.
    #[error("bad model file magic: expected \"LIPN\", got {0:?}")]
    BadMagic([u8; 4]),

    /// Model file version is not supported by this build.
    #[error("unsupported model file version {0} (supported: {1})")]
    UnsupportedVersion(u32, u32),

    /// Model or dataset file ended before all declared payload was read.
    #[error("truncated file: {context} (needed {needed} more bytes)")]
    Truncated {
        context: &'static str,
        needed: usize,
    },

    /// IDX dataset file has the wrong magic number.
    #[error("bad IDX magic {actual} (expected {expected}) in {path}")]
    BadIdxMagic {
        path: String,
        expected: u32,
        actual: u32,
    },

    /// Image and label files disagree on the number of records.
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// A dataset class referenced by an operation has no examples.
    #[error("class {0} has no examples in the dataset")]
    EmptyClass(usize),

    /// The loss became non-finite during training; carries the epoch and batch.
    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// An operation was asked to run on a layer kind it does not support.
    #[error("unsupported layer kind for {operation}: {layer}")]
    UnsupportedLayer {
        operation: &'static str,
        layer: String,
    },

    /// Configuration file problems (unknown key, bad value, missing field).
    #[error("config error: {0}")]
    Config(String),

    /// Wrapper for OS-level I/O failures.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw `io::Error`.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
