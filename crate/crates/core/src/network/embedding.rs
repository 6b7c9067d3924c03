use rand::Rng;

use super::layers::Mlp;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};

/// Sinusoidal diffusion-step embedding followed by a small MLP.
#[derive(Clone, Debug)]
pub struct StepEmbedding {
    pub dim: usize,
    pub mlp: Mlp,
}

impl StepEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            dim,
            mlp: Mlp::new(store, &format!("{name}.mlp"), [dim, 2 * dim, dim], rng),
        }
    }

    /// `steps: [B]` (real-valued so the map can be differentiated) -> `[B, dim]`.
    pub fn forward(&self, g: &mut Graph<'_>, steps: Var) -> Var {
        let e = g.sinusoidal(steps, self.dim);
        self.mlp.forward(g, e)
    }

    pub fn forward_steps(&self, g: &mut Graph<'_>, steps: &[usize]) -> Var {
        let t = g.input(Tensor::new(&[steps.len()], steps.iter().map(|&k| k as f64).collect()));
        self.forward(g, t)
    }
}
