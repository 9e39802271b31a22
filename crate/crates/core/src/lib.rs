//! Deterministic, desk-scale simulator of sequence parallelism for transformer
//! attention.
//!
//! The input sequence is split into `N` contiguous chunks, one per simulated
//! device. Ring self-attention circulates key chunks and then value chunks
//! around the device ring so that every device ends up with complete attention
//! rows for its own tokens. Every transfer is metered in an exact
//! [`CommLedger`], and the [`cost`] module evaluates the closed-form memory and
//! communication models in rational arithmetic.
//!
//! Numeric code is generic over [`Scalar`] (`f64` and `f32`); the aliases at
//! the crate root fix the double-precision flavour used by the CLI and tests.

pub mod config;
pub mod cost;
pub mod error;
pub mod reference;
pub mod rsa;
pub mod scalar;
pub mod sim;
pub mod sparse;
pub mod tensor;
pub mod tensor_parallel;

pub use config::AttentionConfig;
pub use cost::{Block, CostReport, Parallelism, Pass, Rational, Scheme};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use sim::{Cluster, CommLedger, DeviceCtx, Executor, RingTopology, ShardedSequence};
pub use sparse::SparseShardConfig;
pub use tensor::{Rng, Tensor};

/// Double-precision tensor, the canonical numeric carrier.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
pub type AttentionWeights64 = reference::AttentionWeights<f64>;
pub type MlpWeights64 = reference::MlpWeights<f64>;
pub type SparseWeights64 = reference::SparseWeights<f64>;
pub type QkvShard64 = rsa::QkvShard<f64>;
pub type SparseForward64 = sparse::SparseForward<f64>;
