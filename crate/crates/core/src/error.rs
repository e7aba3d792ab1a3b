//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {}x{}, right is {}x{}", .lhs.0, .lhs.1, .rhs.0, .rhs.1)]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error(
        "matrix is singular or ill-conditioned (pivot ratio {pivot_ratio:.3e} below threshold)"
    )]
    Singular { pivot_ratio: f64 },

    #[error("right inverse requires rows <= cols, got {rows}x{cols}")]
    NotWide { rows: usize, cols: usize },

    #[error("rotary embedding requires an even head dimension, got {0}")]
    OddHeadDim(usize),

    #[error("position {position} beyond precomputed rotary table (max {max})")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("vector length {len} is not a multiple of head dimension {head_dim}")]
    HeadWidthMismatch { len: usize, head_dim: usize },

    #[error("key cache stores {found} keys but the kernel needs {expected} keys")]
    CacheModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("{kernel} does not support rotary position encoding")]
    RopeUnsupported { kernel: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "layer {layer}: could not sample an invertible key projection after {attempts} attempts"
    )]
    SynthesisRetries { layer: usize, attempts: u32 },

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model has no layers")]
    EmptyModel,

    #[error("layer count mismatch: {left} vs {right}")]
    LayerCountMismatch { left: usize, right: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: blob checksum mismatch (manifest {expected:#010x}, computed {found:#010x})")]
    ChecksumMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("unknown dtype {0:?} (expected \"f64\" or \"f32\")")]
    UnknownDtype(String),

    #[error("unsupported endianness {0:?} (only \"little\" is written)")]
    UnknownEndianness(String),

    #[error("tensor {tensor}: region needs {needed} bytes but only {available} are available")]
    TruncatedBlob {
        tensor: String,
        needed: u64,
        available: u64,
    },

    #[error("tensor {tensor}: shape {found:?} does not match expected {expected:?}")]
    TensorShape {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("tensor {0} missing from manifest")]
    MissingTensor(String),

    #[error("{path}: expected a {expected} model (check the manifest's \"slim\" flag)")]
    WrongModelKind {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("traffic report requested before any decode step ran")]
    NoDecodeSteps,
}
