//! Dense linear algebra and a reverse-mode differentiation engine.

mod algebra;
mod graph;
mod linalg;
mod tensor;

pub use algebra::{Algebra, Eager};
pub use graph::{eval_and_grad, grad_check, Adjoints, Graph, NodeId};
pub use linalg::{
    cholesky_factor, inverse, min_eigenvalue_sym, solve_linear, solve_upper, solve_upper_transposed,
    spectral_norm, symmetric_eigenvalues, Lu,
};
pub use tensor::Tensor;

pub use graph::cross_entropy_value as cross_entropy;
pub(crate) use graph::{avg_pool, max_pool};
