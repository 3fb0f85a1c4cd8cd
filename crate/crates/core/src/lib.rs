//! Residual attention debiasing for transformer encoders, from scratch.

pub mod data;
pub mod eval;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Example, GroupTag, SyntheticTaskSpec, TaskKind};
pub use model::{EncodedBatch, ForwardMode, ModelConfig, ParamPartition, ReadModel};
pub use objective::LossBreakdown;
pub use train::{Checkpoint, TrainConfig};
pub use tensor::{Tape, Tensor, TensorError, Var};
