//! Dense reverse-mode differentiation over `f64` tensors.

pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
