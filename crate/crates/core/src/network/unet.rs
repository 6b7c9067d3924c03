//! 1-D convolutional U-Net over the flattened hierarchical chunk.

use rand::Rng;

use super::layers::{Conv1d, Film, GroupNorm, Linear};
use crate::autodiff::{Graph, ParamStore, Var};

/// conv -> GN -> SiLU -> FiLM(cond) -> conv -> GN -> SiLU, plus a residual.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv1d,
    pub norm1: GroupNorm,
    pub film: Film,
    pub conv2: Conv1d,
    pub norm2: GroupNorm,
    pub skip: Option<Linear>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cond_dim: usize,
        kernel: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), in_ch, out_ch, kernel, 1, rng),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), out_ch, groups),
            film: Film::new(store, &format!("{name}.film"), cond_dim, out_ch, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), out_ch, out_ch, kernel, 1, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_ch, groups),
            skip: (in_ch != out_ch).then(|| Linear::new(store, &format!("{name}.skip"), in_ch, out_ch, rng)),
        }
    }

    /// `x: [B, L, in]`, `cond: [Bc, 1, D]` -> `[B, L, out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.norm1.forward(g, h);
        let h = g.silu(h);
        let h = self.film.forward(g, cond, h);
        let h = self.conv2.forward(g, h);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let res = match &self.skip {
            Some(lin) => lin.forward(g, x),
            None => x,
        };
        g.add(h, res)
    }
}

/// Three-level U-Net: residual block per level on the way down (stride-2
/// convolution between levels), a middle block, and on the way up a nearest
/// resize back to the skip length followed by a block over `[x, skip]`.
#[derive(Clone, Debug)]
pub struct ConditionalUnet1d {
    pub down: Vec<ResBlock>,
    pub downsample: Vec<Conv1d>,
    pub mid: ResBlock,
    pub up: Vec<ResBlock>,
    pub final_conv: Conv1d,
    pub final_norm: GroupNorm,
    pub out: Linear,
}

impl ConditionalUnet1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        channels: &[usize],
        out_dim: usize,
        cond_dim: usize,
        kernel: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!channels.is_empty(), "U-Net needs at least one level");
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = in_ch;
        for (i, &c) in channels.iter().enumerate() {
            down.push(ResBlock::new(
                store,
                &format!("{name}.down{i}"),
                prev,
                c,
                cond_dim,
                kernel,
                groups,
                rng,
            ));
            if i + 1 < channels.len() {
                downsample.push(Conv1d::new(store, &format!("{name}.pool{i}"), c, c, 3, 2, rng));
            }
            prev = c;
        }
        let last = *channels.last().unwrap();
        let mid = ResBlock::new(store, &format!("{name}.mid"), last, last, cond_dim, kernel, groups, rng);
        let mut up = Vec::new();
        for i in (0..channels.len() - 1).rev() {
            let c = channels[i];
            up.push(ResBlock::new(
                store,
                &format!("{name}.up{i}"),
                prev + c,
                c,
                cond_dim,
                kernel,
                groups,
                rng,
            ));
            prev = c;
        }
        Self {
            down,
            downsample,
            mid,
            up,
            final_conv: Conv1d::new(store, &format!("{name}.final"), prev, prev, kernel, 1, rng),
            final_norm: GroupNorm::new(store, &format!("{name}.final_norm"), prev, groups),
            out: Linear::new(store, &format!("{name}.out"), prev, out_dim, rng),
        }
    }

    /// `x: [B, L, in]`, `cond: [Bc, 1, D]` -> `[B, L, out_dim]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> Var {
        let mut skips = Vec::new();
        let mut h = x;
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(g, h, cond);
            if let Some(pool) = self.downsample.get(i) {
                skips.push(h);
                h = pool.forward(g, h);
            }
        }
        h = self.mid.forward(g, h, cond);
        for block in &self.up {
            let skip = skips.pop().expect("skip per up block");
            let len = g.shape(skip)[1];
            h = g.upsample(h, len);
            h = g.concat(&[h, skip], 2);
            h = block.forward(g, h, cond);
        }
        h = self.final_conv.forward(g, h);
        h = self.final_norm.forward(g, h);
        h = g.silu(h);
        self.out.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_length_for_odd_and_even_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let unet = ConditionalUnet1d::new(&mut store, "u", 4, &[8, 16, 16], 3, 6, 5, 4, &mut rng);
        for len in [8usize, 12, 24, 9] {
            let mut g = Graph::inference(&store);
            let x = g.input(Tensor::from_fn(&[2, len, 4], |i| (i as f64 * 0.37).sin()));
            let c = g.input(Tensor::from_fn(&[1, 1, 6], |i| i as f64 * 0.1));
            let y = unet.forward(&mut g, x, c);
            assert_eq!(g.shape(y), &[2, len, 3]);
            assert!(g.value(y).all_finite());
        }
    }
}
