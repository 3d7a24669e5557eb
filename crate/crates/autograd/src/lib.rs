//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records operations performed through [`Var`] handles; a single
//! [`Tape::backward`] call returns gradients for every leaf. The operation
//! set is what a small convolution + transformer network needs: broadcasting
//! arithmetic, matrix products, convolution, pooling, bilinear resampling,
//! normalization, softmax and pairwise distances.

mod gradcheck;
mod linalg;
mod nn;
mod ops;
mod tape;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use linalg::matmul_plain;
pub use nn::{bilinear_matrix, pairwise_euclidean_plain, BatchStats, Conv2dGeometry};
pub use ops::{gelu, gelu_grad, ordered_sum, sum_to_shape};
pub use tape::{Gradients, Tape, Tensor, Var};
