//! Tensors, kernels and the reverse-mode tape used for training.

pub mod backend;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use backend::{Backend, Eval};
pub use gradcheck::{grad_check, grad_check_global};
pub use graph::{Gradients, Graph, LinearMap, Var};
pub use ops::RoundMode;
pub use tensor::{Element, ElementKind, IntTensor, RealTensor, Tensor};
