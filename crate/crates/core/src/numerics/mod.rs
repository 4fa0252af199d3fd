//! Dense tensors, reverse-mode differentiation and gradient verification.

pub mod functional;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use functional::{cosine_similarity, norm, softmax, softmax_cross_entropy};
pub use gradcheck::{grad_check, GradCheckCase, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
