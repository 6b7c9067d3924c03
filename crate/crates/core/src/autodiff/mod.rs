//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! Just enough machinery for the denoiser: linear maps, 1-D convolution via
//! window unfolding, group normalization, broadcasting FiLM products, a
//! single-query attention kernel and sinusoidal embeddings.

mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
