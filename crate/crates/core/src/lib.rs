//! Exact KV-cache compression for multi-head attention.
//!
//! The key projection of an MHA layer is (almost always) invertible, so the
//! value projections can be recomputed from the keys at decode time instead
//! of being cached: `V = K (W_K^{-1} W_V)`. That halves the context memory
//! of any MHA transformer without changing its outputs. This crate provides
//!
//! * reference attention kernels: the standard KV-cache implementation and
//!   the mathematically identical K-cache, X-cache, and V-cache variants,
//!   all instrumented with operation counters ([`attention`], [`rope`]);
//! * the offline weight transforms and their verification ([`transform`]);
//! * a toy encoder-decoder stack with interchangeable cache policies
//!   ([`encdec`]);
//! * a closed-form cost model for cache sizes, per-token complexity,
//!   arithmetic intensity, and memory-bound speedups ([`cost`]);
//! * a neutral tensor file format and synthetic model generation
//!   ([`model`], [`io`]).
//!
//! Everything computes in `f64` and is deterministic, including the seeded
//! generator behind synthetic weights.

pub mod attention;
pub mod cost;
pub mod encdec;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod rope;
pub mod transform;

pub use error::{Error, Result};
pub use linalg::{Matrix, OpCounter};
pub use model::{LayerWeights, Model, ModelConfig, SlimMode, SlimModel, TransformedWeights};
