//! Tensor arithmetic, differentiable primitives, parameters and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;


pub use graph::{Gradients, Graph, Var};
pub use ops::{cross_entropy, layer_norm, matmul, sigmoid, softmax_rows};
pub use optim::{adam_step, AdamHyper, AdamState};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tensor::{Mask, Real, Tensor};
