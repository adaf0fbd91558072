//! Dense-network engine: a small DAG of layers with exact backpropagation,
//! deterministic initialization, SGD/Adam optimizers and L1/L2 penalties.
//!
//! The engine is generic over the scalar type: `f64` is the default for
//! training math (gradient tolerances depend on it), `f32` is available
//! behind the same API. Checkpoints always store `f64`.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod init;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use graph::{
    Gradients, GraphBuilder, LayerKind, LayerNode, Mode, ModelGraph, NodeParams, Workspace,
};
pub use init::init_params;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor2;

use thiserror::Error;

/// Scalar type the engine computes in.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by node {node} ({name})")]
    NonFiniteValue { node: usize, name: String },
    #[error("backward called without a cached forward pass")]
    NoCachedForward,
    #[error("bad graph: {0}")]
    BadGraph(String),
}

/// Norm used for the weight penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegNorm {
    #[default]
    None,
    L1,
    L2,
}

/// Weight regularization. Applies to weight matrices only, never biases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegConfig {
    pub norm: RegNorm,
    pub penalty: f64,
}

impl RegConfig {
    pub fn none() -> Self {
        RegConfig::default()
    }

    pub fn l1(penalty: f64) -> Self {
        assert!(penalty >= 0.0, "penalty must be nonnegative");
        RegConfig {
            norm: RegNorm::L1,
            penalty,
        }
    }

    pub fn l2(penalty: f64) -> Self {
        assert!(penalty >= 0.0, "penalty must be nonnegative");
        RegConfig {
            norm: RegNorm::L2,
            penalty,
        }
    }
}
