//! Minimal reverse-mode differentiation engine.
//!
//! Tensors are plain row-major buffers. A [`Graph`] records tensor-level
//! operations and replays them backwards; parameters enter the graph by
//! reference so forward-only evaluation of a trained model does not copy
//! weights. Everything is generic over [`Real`] (`f32` or `f64`).

mod checkpoint;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, DType, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{grad, Graph, Padding, Var};
pub use optim::{ema_update, AdamConfig, OptState};
pub use params::{ParamSet, ParamVars};
pub use real::{gemm, Real};
pub use tensor::Tensor;
