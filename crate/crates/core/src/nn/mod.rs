//! Minimal CPU tensor and autodiff engine backing the network.

pub mod conv;
pub mod graph;
pub mod tensor;

pub use conv::ConvSpec;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
