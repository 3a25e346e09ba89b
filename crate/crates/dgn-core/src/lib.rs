//! Depth-guided dual-branch image restoration.
//!
//! The crate has three layers:
//!
//! * a small reverse-mode autodiff tape over `ndarray` ([`graph`]), generic
//!   over the scalar type via [`Scalar`] (f32 for training speed, f64 for
//!   gradient verification);
//! * the network itself: windowed spatial/channel self-correlation ([`intra`]),
//!   LSH-bucketed sparse non-local attention ([`inter`]), the dual-branch
//!   assembly ([`net`]), losses ([`loss`]) and full-reference metrics
//!   ([`metrics`]);
//! * the data and harness layer: dataset curation, degradation synthesis and
//!   patch sampling ([`data`]), the training loop with Adam and checkpointing
//!   ([`train`]), and evaluation/inference ([`eval`]).
//!
//! All randomness flows through seeded ChaCha8 generators (see [`rng`]), so
//! every path — bucket assignment, noise synthesis, batch sampling, parameter
//! init — is reproducible bit-for-bit on any platform.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub mod data;
pub mod eval;
pub mod graph;
pub mod inter;
pub mod intra;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod train;

/// Scalar type the whole numeric stack is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + std::iter::Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Name recorded in checkpoint headers ("f32" / "f64").
    fn dtype_name() -> &'static str;
    /// Bytes per scalar in checkpoint blobs.
    const BYTE_WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn dtype_name() -> &'static str {
        "f32"
    }
    const BYTE_WIDTH: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn dtype_name() -> &'static str {
        "f64"
    }
    const BYTE_WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Concrete aliases for the two supported precisions.
pub type GraphF32 = graph::Graph<f32>;
pub type GraphF64 = graph::Graph<f64>;
pub type ParamsF32 = net::Params<f32>;
pub type ParamsF64 = net::Params<f64>;
pub type TrainStateF32 = train::TrainState<f32>;
pub type TrainStateF64 = train::TrainState<f64>;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum DgnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt window set: {0}")]
    CorruptWindowSet(String),
    #[error("dense oracle refused: {positions} positions exceeds the {limit} limit")]
    OracleScaleExceeded { positions: usize, limit: usize },
    #[error("missing depth sidecar for image `{0}`")]
    MissingDepth(String),
    #[error("failed to decode image `{path}`: {reason}")]
    DecodeError { path: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("loss became non-finite at iteration {iter}; last good checkpoint: {last_checkpoint}")]
    NanLoss { iter: usize, last_checkpoint: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DgnError>;

pub(crate) fn invalid_arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(DgnError::InvalidArgument(msg.into()))
}

pub(crate) fn invalid_config<T>(msg: impl Into<String>) -> Result<T> {
    Err(DgnError::InvalidConfig(msg.into()))
}
