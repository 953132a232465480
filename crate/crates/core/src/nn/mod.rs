//! Minimal differentiable-kernel layer: dense arrays, convolutions, layer
//! normalisation, centered DFTs, reverse-mode gradients and a finite
//! difference checker.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod optim;
mod params;
mod real;
pub mod spectral;
mod tensor;

pub use graph::{Backward, Gradients, Graph, Var};
pub use params::{uniform_init, ParamStore, Parameter};
pub use real::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real};
pub use tensor::{strides, Tensor};
