//! Minimal reverse-mode differentiable numerics.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradReport};
pub use graph::{Backward, Graph, Var};
pub use optim::Sgd;
pub use param::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
