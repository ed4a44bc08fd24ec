//! Dense `f64` arrays and a tape-based reverse-mode differentiator, sized for
//! backpropagating a classification loss through a small convolutional
//! network down to an additive input perturbation.

mod array;
pub mod kernels;
mod tape;

pub use array::{NdArray, Shape, MAX_RANK};
pub use tape::{backward, Gradients, NodeId, Tape, Var};
