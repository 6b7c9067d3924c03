//! Parameterized building blocks.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

/// `y = x @ W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Two linear layers with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.silu(h);
        self.second.forward(g, h)
    }
}

/// 1-D convolution over `[B, L, C_in]` (channels last) with "same"-style
/// zero padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel;
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[fan_in, out_ch], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[out_ch], fan_in, rng),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let cols = g.im2col(x, self.kernel, self.stride, self.pad);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(cols, w);
        g.add_bias(y, b)
    }
}

/// Group normalization with per-channel affine terms.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[channels], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
            groups: groups.min(channels).max(1),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let c = *g.shape(x).last().unwrap();
        let mut groups = self.groups;
        while !c.is_multiple_of(groups) {
            groups -= 1;
        }
        let n = g.group_norm(x, groups, 1e-5);
        let gain = g.param(self.gain);
        let gain = g.reshape(gain, &[1, 1, c]);
        let shift = g.param(self.shift);
        let n = g.bcast_mul(n, gain);
        g.add_bias(n, shift)
    }
}

/// Feature-wise linear modulation: `out = gamma(cond) * x + beta(cond)`.
///
/// `gamma` and `beta` are one affine map of the conditioning feature. The
/// conditioning may have batch 1 (shared across samples) and its own temporal
/// length; it is resampled (nearest) to the length of `x`.
#[derive(Clone, Debug)]
pub struct Film {
    pub proj: Linear,
    pub channels: usize,
}

impl Film {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), cond_dim, 2 * channels, rng);
        // centre gamma on 1 so a fresh layer starts close to identity
        let bias = store.get_mut(proj.bias).data_mut();
        for v in &mut bias[..channels] {
            *v += 1.0;
        }
        Self { proj, channels }
    }

    /// Zero weights, gamma bias 1, beta bias 0: an exact identity map.
    pub fn set_identity(&self, store: &mut ParamStore) {
        store.get_mut(self.proj.weight).data_mut().fill(0.0);
        let bias = store.get_mut(self.proj.bias).data_mut();
        bias[..self.channels].fill(1.0);
        bias[self.channels..].fill(0.0);
    }

    /// Scale and shift `[Bc, Tc, C]` computed from a `[Bc, Tc, D]` condition.
    pub fn modulation(&self, g: &mut Graph<'_>, cond: Var) -> (Var, Var) {
        let gb = self.proj.forward(g, cond);
        let gamma = g.slice(gb, 2, 0, self.channels);
        let beta = g.slice(gb, 2, self.channels, self.channels);
        (gamma, beta)
    }

    /// `cond: [Bc, Tc, D]`, `x: [B, T, C]`; `Bc` is 1 or `B`.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, x: Var) -> Var {
        let (gamma, beta) = self.modulation(g, cond);
        let t = g.shape(x)[1];
        let tc = g.shape(gamma)[1];
        let (gamma, beta) = if tc != 1 && tc != t {
            (g.upsample(gamma, t), g.upsample(beta, t))
        } else {
            (gamma, beta)
        };
        let y = g.bcast_mul(x, gamma);
        g.bcast_add(y, beta)
    }
}
