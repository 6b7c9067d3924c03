//! Cross-frequency fusion through a learned CLS query.

use rand::Rng;

use super::layers::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};

/// Cross-attention from a learned CLS token over every per-frequency action
/// token, producing one global feature per sample.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub cls: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(
            width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        Self {
            cls: store.add_uniform(format!("{name}.cls"), &[1, width], width, rng),
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        }
    }

    /// Returns `(global [B, C], attention node)`; `tokens: [B, T, C]`.
    pub fn forward_with_weights(&self, g: &mut Graph<'_>, tokens: Var) -> (Var, Var) {
        let cls = g.param(self.cls);
        let q = self.query.forward(g, cls);
        let k = self.key.forward(g, tokens);
        let v = self.value.forward(g, tokens);
        let attended = g.attend(q, k, v, self.heads);
        (self.out.forward(g, attended), attended)
    }

    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var) -> Var {
        self.forward_with_weights(g, tokens).0
    }
}

/// Global fusion: attend over all frequencies, append the global feature
/// (tiled to `L_c` positions) after the local tokens, then mix the
/// `(M+1)*L_c` positions back down to `M*L_c`.
#[derive(Clone, Debug)]
pub struct GlobalFusion {
    pub attention: CrossAttention,
    pub mix: ParamId,
    pub local_len: usize,
    pub global_len: usize,
}

impl GlobalFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        local_len: usize,
        global_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let attention = CrossAttention::new(store, &format!("{name}.attn"), width, heads, rng);
        let total = local_len + global_len;
        // identity on the local tokens plus a small random read of the global ones
        let bound = 1.0 / (total as f64).sqrt();
        let mut mix = crate::autodiff::Tensor::zeros(&[local_len, total]);
        for i in 0..local_len {
            for j in 0..total {
                let v = &mut mix.data_mut()[i * total + j];
                *v = if j == i {
                    1.0
                } else if j >= local_len {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                };
            }
        }
        let mix = store.add(format!("{name}.mix"), mix);
        Self {
            attention,
            mix,
            local_len,
            global_len,
        }
    }

    /// `tokens: [B, M*L_c, C]` -> `[B, M*L_c, C]`.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var) -> Var {
        self.forward_traced(g, tokens).0
    }

    /// Returns `(mixed, global [B, C], attention node)`.
    pub fn forward_traced(&self, g: &mut Graph<'_>, tokens: Var) -> (Var, Var, Var) {
        let shape = g.shape(tokens).to_vec();
        let (b, c) = (shape[0], shape[2]);
        let (global, node) = self.attention.forward_with_weights(g, tokens);
        let tiled = g.reshape(global, &[b, 1, c]);
        let tiled = g.broadcast_to(tiled, &[b, self.global_len, c]);
        let joined = g.concat(&[tokens, tiled], 1);
        let mix = g.param(self.mix);
        (g.temporal_mix(mix, joined), global, node)
    }
}
