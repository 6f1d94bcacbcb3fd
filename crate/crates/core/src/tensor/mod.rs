//! Minimal differentiable substrate: tape autodiff, parameter store,
//! transformer blocks, AdamW, checkpoints and gradient checking.

pub mod adamw;
pub mod blocks;
pub mod checkpoint;
pub mod scalar;
pub mod store;
pub mod tape;

pub use adamw::{cosine_lr, AdamWConfig, OptimizerState};
pub use blocks::{BlockConfig, Dropout};
pub use scalar::Scalar;
pub use store::ParamStore;
pub use tape::{Tape, TensorId};
