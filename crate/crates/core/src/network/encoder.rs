use rand::Rng;

use super::layers::{Linear, Mlp};
use crate::autodiff::{Graph, ParamStore, Var};

/// Per-frame encoder shared by every frequency: one MLP per modality, a
/// projection of the concatenation to the hidden width, then a window summary
/// added back onto each frame so every output frame sees its whole window.
#[derive(Clone, Debug)]
pub struct ObservationEncoder {
    pub visual: Mlp,
    pub proprio: Mlp,
    pub project: Linear,
    pub window: Linear,
    pub visual_dim: usize,
    pub proprio_dim: usize,
    pub history_len: usize,
    pub width: usize,
}

impl ObservationEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        visual_dim: usize,
        proprio_dim: usize,
        hidden: usize,
        width: usize,
        history_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            visual: Mlp::new(store, &format!("{name}.visual"), [visual_dim, hidden, hidden], rng),
            proprio: Mlp::new(store, &format!("{name}.proprio"), [proprio_dim, hidden, hidden], rng),
            project: Linear::new(store, &format!("{name}.project"), 2 * hidden, width, rng),
            window: Linear::new(store, &format!("{name}.window"), history_len * width, width, rng),
            visual_dim,
            proprio_dim,
            history_len,
            width,
        }
    }

    /// `frames: [W, L_h, visual + proprio]` -> `[W, L_h, width]` where `W`
    /// indexes independent windows (batch x frequency).
    pub fn forward(&self, g: &mut Graph<'_>, frames: Var) -> Var {
        let shape = g.shape(frames).to_vec();
        let (w, l) = (shape[0], shape[1]);
        let flat = g.reshape(frames, &[w * l, self.visual_dim + self.proprio_dim]);
        let vis = g.slice(flat, 1, 0, self.visual_dim);
        let pro = g.slice(flat, 1, self.visual_dim, self.proprio_dim);
        let vis = self.visual.forward(g, vis);
        let pro = self.proprio.forward(g, pro);
        let joined = g.concat(&[vis, pro], 1);
        let h = self.project.forward(g, joined);
        let h = g.silu(h);
        let per_frame = g.reshape(h, &[w, l, self.width]);
        let window = g.reshape(h, &[w, l * self.width]);
        let summary = self.window.forward(g, window);
        let summary = g.reshape(summary, &[w, 1, self.width]);
        g.bcast_add(per_frame, summary)
    }
}
