//! Reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles; a
//! reverse sweep from a scalar returns [`Gradients`] for the leaves. The op
//! set is the one needed by convolutional / transformer segmentation models:
//! broadcasting arithmetic, matrix products, 2-D (transposed) convolution,
//! batch and layer normalization, bilinear resizing, adaptive pooling and a
//! masked cross-entropy.
//!
//! All arithmetic is single-threaded, so results are bit-reproducible for a
//! given input on a given machine.

mod float;
mod graph;
mod ops;

pub mod check;

pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use ops::{BatchNormOutput, Conv2dSpec, CrossEntropy};
pub use ops::adaptive_bin;
