//! Dense FP64 tensors, BF16 rounding emulation, seeded randomness and a small
//! reverse-mode differentiation tape.

pub mod autograd;
pub mod bf16;
mod rng;
mod tensor;

pub use autograd::{grad, Graph, NodeId};
pub use rng::{Rng, RNG_ALGORITHM};
pub use tensor::{matmul, round_bf16, Precision, Tensor};
