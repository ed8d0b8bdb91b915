//! Numerical substrate: tensors, reverse-mode autodiff, RNG and Adam.

mod adam;
mod conv;
mod gemm;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
