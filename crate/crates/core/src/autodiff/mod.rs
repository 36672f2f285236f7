//! Minimal reverse-mode differentiation over a fixed set of layer kinds:
//! dense, 2-D convolution, 2×2 max pooling, relu, sigmoid, softplus,
//! (spatial) dropout, concatenation and flattening.
//!
//! A [`Graph`] is built once, then executed with [`Graph::forward`] which
//! returns a [`Record`] of intermediates. [`Graph::backward`] turns output
//! gradients into parameter gradients using the masks stored in that record.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckReport, LossFn};
pub use graph::{DropoutMasks, DropoutSpec, Gradients, Graph, Mode, Node, NodeId, OpKind, Param, ParamId, Record};
pub use tensor::{Real, Tensor};

pub(crate) use kernels::{sigmoid, softplus};

#[cfg(test)]
mod tests;
