//! Dense tensors with reverse-mode differentiation and the Adam update.
//!
//! A [`Graph`] records every operation of one forward pass on a tape of
//! nodes. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar with respect to every [`ParamStore`] entry that
//! reached it.

mod checkpoint;
mod gemm;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC};
pub use graph::{Graph, ReduceMode, Var};
pub use optim::{adam_step, AdamConfig, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
