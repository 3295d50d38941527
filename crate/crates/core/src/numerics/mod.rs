//! Dense tensors, reverse-mode autodiff, seeded randomness and the scalar
//! functions everything else is built from.

pub mod activations;
pub mod autograd;
pub mod gradcheck;
pub mod params;
pub mod random;
pub mod tensor;

pub use autograd::{CustomOp, Gradients, Tape, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use random::RngStream;
pub use tensor::Tensor;
