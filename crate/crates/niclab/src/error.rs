//! Crate-wide error type.
//!
//! Exit-code mapping for the CLI lives in `cli`; the variants here follow the
//! failure classes of the library: shape/value contract violations, codec
//! version routing, on-disk format problems, and numeric failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not match the operation's contract.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Non-finite value (NaN/Inf) where a finite one is required.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Codec version routing violation (e.g. decoding a v2 stream with a v1 model).
    #[error("version error: {0}")]
    Version(String),

    /// Malformed file or bitstream; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Payload cannot be decoded (truncation, impossible state).
    #[error("decode error: {0}")]
    Decode(String),

    /// Caller violated an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Bitstream was produced by a model with a different shared-parameter hash.
    #[error("wrong model: bitstream hash {expected:016x} != model hash {found:016x}")]
    WrongModel { expected: u64, found: u64 },

    /// Entropy model too degenerate to build coding tables from.
    #[error("model degenerate: {0}")]
    ModelDegenerate(String),

    /// Evaluation-level failure (e.g. BD-rate on non-overlapping curves).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Training diverged or produced non-finite gradients.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
