//! Dense tensors, a reverse-mode tape, Adam with EMA tracking, checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, ParamStore};
pub use tape::{forward, Gradients, Tape, Var};
pub use tensor::Tensor;
