//! Dense tensors, a reverse-mode autodiff tape, finite-difference gradient
//! checks and the Adam optimizer.

mod float;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use float::Float;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, LeafReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
