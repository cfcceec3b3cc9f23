//! Differentiable-computation kernel: tensors, a reverse-mode tape, network
//! building blocks, positional encodings, the low-rank transition
//! parameterization, weight serialization, and the optimizer.

pub mod adam;
pub mod check;
pub mod encode;
pub mod layers;
pub mod lowrank;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use tape::{concat_cols, Grads, Tape, Var};
pub use tensor::Tensor;
