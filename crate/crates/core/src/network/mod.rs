//! The noise-prediction network.
//!
//! Pipeline: per-frequency observation encoding, chunk embedding, one FiLM per
//! frequency conditioned on that frequency's observation features, global
//! CLS-attention fusion, a second FiLM over all frequencies, then a
//! conditional 1-D U-Net and a projection back to action space.

pub mod attention;
pub mod embedding;
pub mod encoder;
pub mod layers;
pub mod unet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
pub use attention::{CrossAttention, GlobalFusion};
pub use embedding::StepEmbedding;
pub use encoder::ObservationEncoder;
pub use layers::{Conv1d, Film, GroupNorm, Linear, Mlp};
pub use unet::{ConditionalUnet1d, ResBlock};

/// Which observation features condition each frequency's action tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    /// Frequency `m` is conditioned on the history sampled at stride `m`.
    #[default]
    Hierarchical,
    /// Every frequency sees only the stride-1 history.
    HighOnly,
    /// Every frequency sees only the coarsest history.
    LowOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub width: usize,
    pub channel_mults: Vec<usize>,
    pub step_embed_dim: usize,
    pub heads: usize,
    pub num_frequencies: usize,
    pub history_len: usize,
    pub chunk_len: usize,
    pub action_dim: usize,
    pub visual_dim: usize,
    pub proprio_dim: usize,
    pub encoder_hidden: usize,
    pub kernel: usize,
    pub groups: usize,
    pub condition: ConditionMode,
    pub fusion: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 64,
            channel_mults: vec![1, 2, 2],
            step_embed_dim: 128,
            heads: 4,
            num_frequencies: 3,
            history_len: 3,
            chunk_len: 8,
            action_dim: 3,
            visual_dim: 6,
            proprio_dim: 3,
            encoder_hidden: 64,
            kernel: 5,
            groups: 8,
            condition: ConditionMode::Hierarchical,
            fusion: true,
        }
    }
}

impl DenoiserConfig {
    pub fn obs_dim(&self) -> usize {
        self.visual_dim + self.proprio_dim
    }

    /// Temporal length of the flattened chunk, `M * L_c`.
    pub fn chunk_tokens(&self) -> usize {
        self.num_frequencies * self.chunk_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("step_embed_dim", self.step_embed_dim),
            ("heads", self.heads),
            ("num_frequencies", self.num_frequencies),
            ("history_len", self.history_len),
            ("chunk_len", self.chunk_len),
            ("action_dim", self.action_dim),
            ("visual_dim", self.visual_dim),
            ("proprio_dim", self.proprio_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("kernel", self.kernel),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::InvalidArgument(
                "channel_mults must be non-empty and positive".into(),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("kernel must be odd".into()));
        }
        if !self.step_embed_dim.is_multiple_of(2) || self.step_embed_dim < 4 {
            return Err(Error::InvalidArgument("step_embed_dim must be even and >= 4".into()));
        }
        Ok(())
    }
}

/// Encoded observation features `[M, L_h, C]` for one history.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsFeature {
    pub features: Tensor,
}

impl ObsFeature {
    pub fn num_frequencies(&self) -> usize {
        self.features.dim(0)
    }

    /// Feature sequence `[L_h, C]` of frequency `m`, row-major.
    pub fn per_frequency(&self, m: usize) -> &[f64] {
        let n = self.features.dim(1) * self.features.dim(2);
        &self.features.data()[m * n..(m + 1) * n]
    }
}

/// Intermediate action features of one forward pass.
#[derive(Clone, Debug)]
pub struct ActFeature {
    /// `[B, M*L_c, C]` after the per-frequency FiLM.
    pub per_frequency: Tensor,
    /// `[B, C]` CLS output, absent when fusion is disabled.
    pub global: Option<Tensor>,
    /// `[B, M*L_c, C]` after fusion and the second FiLM.
    pub fused: Tensor,
    /// CLS attention weights `[B, heads, M*L_c]`.
    pub attention: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    encoder: ObservationEncoder,
    chunk_embed: Linear,
    position: ParamId,
    freq_film: Vec<Film>,
    fusion: Option<GlobalFusion>,
    fuse_film: Film,
    obs_summary: Linear,
    step: StepEmbedding,
    unet: ConditionalUnet1d,
}

struct Trace {
    per_frequency: Var,
    global: Option<(Var, Var)>,
    fused: Var,
}

impl Denoiser {
    /// Fresh network; the initialization is a pure function of `(config, seed)`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.width;
        let encoder = ObservationEncoder::new(
            &mut store,
            "encoder",
            config.visual_dim,
            config.proprio_dim,
            config.encoder_hidden,
            c,
            config.history_len,
            &mut rng,
        );
        let chunk_embed = Linear::new(&mut store, "chunk_embed", config.action_dim, c, &mut rng);
        let tokens = config.chunk_tokens();
        let pos = Tensor::from_fn(&[1, tokens, c], |_| 0.02 * rng.sample::<f64, _>(StandardNormal));
        let position = store.add("position", pos);
        let freq_film = (0..config.num_frequencies)
            .map(|m| Film::new(&mut store, &format!("film{m}"), c, c, &mut rng))
            .collect();
        let fusion = config.fusion.then(|| {
            GlobalFusion::new(
                &mut store,
                "fusion",
                c,
                config.heads,
                tokens,
                config.chunk_len,
                &mut rng,
            )
        });
        let fuse_film = Film::new(&mut store, "fuse_film", c, c, &mut rng);
        let obs_summary = Linear::new(
            &mut store,
            "obs_summary",
            config.num_frequencies * config.history_len * c,
            c,
            &mut rng,
        );
        let step = StepEmbedding::new(&mut store, "step", config.step_embed_dim, &mut rng);
        let channels: Vec<usize> = config.channel_mults.iter().map(|m| m * c).collect();
        let unet = ConditionalUnet1d::new(
            &mut store,
            "unet",
            c,
            &channels,
            config.action_dim,
            config.step_embed_dim + c,
            config.kernel,
            config.groups,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            encoder,
            chunk_embed,
            position,
            freq_film,
            fusion,
            fuse_film,
            obs_summary,
            step,
            unet,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn freq_films(&self) -> &[Film] {
        &self.freq_film
    }

    pub fn fusion(&self) -> Option<&GlobalFusion> {
        self.fusion.as_ref()
    }

    /// `history: [B, M, L_h, obs]` -> `[B, M, L_h, C]`, before the
    /// condition-mode selection.
    pub fn encode_graph(&self, g: &mut Graph<'_>, history: Var) -> Var {
        let cfg = &self.config;
        let b = g.shape(history)[0];
        let (m, l) = (cfg.num_frequencies, cfg.history_len);
        let frames = g.reshape(history, &[b * m, l, cfg.obs_dim()]);
        let h = self.encoder.forward(g, frames);
        g.reshape(h, &[b, m, l, cfg.width])
    }

    /// Applies the condition mode to encoded features `[B, M, L_h, C]`.
    fn select_condition(&self, g: &mut Graph<'_>, obs: Var) -> Var {
        let m = self.config.num_frequencies;
        let source = match self.config.condition {
            ConditionMode::Hierarchical => return obs,
            ConditionMode::HighOnly => 0,
            ConditionMode::LowOnly => m - 1,
        };
        let one = g.slice(obs, 1, source, 1);
        let parts = vec![one; m];
        g.concat(&parts, 1)
    }

    fn forward_traced(&self, g: &mut Graph<'_>, noisy: Var, steps: Var, obs: Var) -> (Var, Trace) {
        let cfg = &self.config;
        let (m, lc, lh, c) = (cfg.num_frequencies, cfg.chunk_len, cfg.history_len, cfg.width);
        let b = g.shape(noisy)[0];
        let bc = g.shape(obs)[0];
        let obs = self.select_condition(g, obs);

        let tokens = self.chunk_embed.forward(g, noisy);
        let pos = g.param(self.position);
        let tokens = g.bcast_add(tokens, pos);

        let mut parts = Vec::with_capacity(m);
        for (fm, film) in self.freq_film.iter().enumerate() {
            let x = g.slice(tokens, 1, fm * lc, lc);
            let cond = g.slice(obs, 1, fm, 1);
            let cond = g.reshape(cond, &[bc, lh, c]);
            parts.push(film.forward(g, cond, x));
        }
        let per_frequency = if m == 1 { parts[0] } else { g.concat(&parts, 1) };

        let (mixed, global) = match &self.fusion {
            Some(fusion) => {
                let (mixed, global, node) = fusion.forward_traced(g, per_frequency);
                (mixed, Some((global, node)))
            }
            None => (per_frequency, None),
        };
        let all_obs = g.reshape(obs, &[bc, m * lh, c]);
        let fused = self.fuse_film.forward(g, all_obs, mixed);

        let flat_obs = g.reshape(obs, &[bc, m * lh * c]);
        let summary = self.obs_summary.forward(g, flat_obs);
        let summary = g.silu(summary);
        let step = self.step.forward(g, steps);
        let bs = g.shape(step)[0];
        let summary = if bs != bc {
            g.broadcast_to(summary, &[bs, c])
        } else {
            summary
        };
        let cond = g.concat(&[step, summary], 1);
        let cond = g.reshape(cond, &[bs, 1, cfg.step_embed_dim + c]);
        let out = self.unet.forward(g, fused, cond);
        debug_assert_eq!(g.shape(out), &[b, m * lc, cfg.action_dim]);
        (
            out,
            Trace {
                per_frequency,
                global,
                fused,
            },
        )
    }

    /// Training-time forward pass.
    ///
    /// `noisy: [B, M*L_c, D_a]`, `steps: [B]` (or `[1]` shared), `obs` the
    /// output of [`Denoiser::encode_graph`] with batch `B` or 1.
    pub fn forward(&self, g: &mut Graph<'_>, noisy: Var, steps: Var, obs: Var) -> Var {
        self.forward_traced(g, noisy, steps, obs).0
    }

    fn check_history(&self, history: &Tensor) -> Result<()> {
        let cfg = &self.config;
        let want = [cfg.num_frequencies, cfg.history_len, cfg.obs_dim()];
        if history.shape() != want {
            return Err(Error::Shape(format!(
                "history shape {:?}, expected {want:?}",
                history.shape()
            )));
        }
        Ok(())
    }

    /// Encodes one normalized history `[M, L_h, obs]`.
    pub fn encode_observations(&self, history: &Tensor) -> Result<ObsFeature> {
        self.check_history(history)?;
        let mut g = Graph::inference(&self.store);
        let cfg = &self.config;
        let h = g.input(
            history
                .clone()
                .reshape(&[1, cfg.num_frequencies, cfg.history_len, cfg.obs_dim()]),
        );
        let f = self.encode_graph(&mut g, h);
        let t = g.value(f).clone();
        Ok(ObsFeature {
            features: t.reshape(&[cfg.num_frequencies, cfg.history_len, cfg.width]),
        })
    }

    fn check_step(&self, k: usize, max_step: usize) -> Result<()> {
        if k == 0 || k > max_step {
            return Err(Error::StepOutOfRange { step: k, max: max_step });
        }
        Ok(())
    }

    /// Predicted noise for a batch of noisy chunks `[N, M*L_c, D_a]` sharing
    /// one step `k` and one encoded history.
    pub fn predict_noise_batch(&self, noisy: &Tensor, k: usize, max_step: usize, obs: &ObsFeature) -> Result<Tensor> {
        self.check_step(k, max_step)?;
        let cfg = &self.config;
        let want = [cfg.chunk_tokens(), cfg.action_dim];
        if noisy.rank() != 3 || noisy.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "noisy chunk shape {:?}, expected [N, {}, {}]",
                noisy.shape(),
                want[0],
                want[1]
            )));
        }
        let mut g = Graph::inference(&self.store);
        let x = g.input(noisy.clone());
        let steps = g.input(Tensor::new(&[1], vec![k as f64]));
        let o = g.input(
            obs.features
                .clone()
                .reshape(&[1, cfg.num_frequencies, cfg.history_len, cfg.width]),
        );
        let out = self.forward(&mut g, x, steps, o);
        Ok(g.value(out).clone())
    }

    /// Predicted noise for one flattened chunk `[M*L_c, D_a]`.
    pub fn predict_noise(&self, noisy: &Tensor, k: usize, max_step: usize, history: &Tensor) -> Result<Tensor> {
        let obs = self.encode_observations(history)?;
        let shape = noisy.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("noisy chunk shape {shape:?}, expected 2-d")));
        }
        let batched = noisy.clone().reshape(&[1, shape[0], shape[1]]);
        Ok(self.predict_noise_batch(&batched, k, max_step, &obs)?.reshape(&shape))
    }

    /// Intermediate features of one forward pass, for inspection.
    pub fn act_features(&self, noisy: &Tensor, k: usize, history: &Tensor) -> Result<ActFeature> {
        self.check_history(history)?;
        let cfg = &self.config;
        let mut g = Graph::inference(&self.store);
        let shape = noisy.shape().to_vec();
        let x = g.input(noisy.clone().reshape(&[1, shape[0], shape[1]]));
        let steps = g.input(Tensor::new(&[1], vec![k as f64]));
        let h = g.input(
            history
                .clone()
                .reshape(&[1, cfg.num_frequencies, cfg.history_len, cfg.obs_dim()]),
        );
        let obs = self.encode_graph(&mut g, h);
        let (_, trace) = self.forward_traced(&mut g, x, steps, obs);
        Ok(ActFeature {
            per_frequency: g.value(trace.per_frequency).clone(),
            global: trace.global.map(|(v, _)| g.value(v).clone()),
            fused: g.value(trace.fused).clone(),
            attention: trace.global.and_then(|(_, node)| g.attention_weights(node)),
        })
    }

    /// Replaces every parameter by name; shapes must match.
    pub fn load_parameters(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, network has {}",
                params.len(),
                self.store.len()
            )));
        }
        for (name, tensor) in params {
            let id = self
                .store
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            let slot = self.store.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            width: 8,
            channel_mults: vec![1, 2, 2],
            step_embed_dim: 16,
            heads: 2,
            num_frequencies: 3,
            history_len: 3,
            chunk_len: 4,
            action_dim: 3,
            visual_dim: 4,
            proprio_dim: 3,
            encoder_hidden: 8,
            kernel: 5,
            groups: 4,
            condition: ConditionMode::Hierarchical,
            fusion: true,
        }
    }

    fn history(cfg: &DenoiserConfig, seed: f64) -> Tensor {
        Tensor::from_fn(&[cfg.num_frequencies, cfg.history_len, cfg.obs_dim()], |i| {
            ((i as f64 + seed) * 0.731).sin()
        })
    }

    fn chunk(cfg: &DenoiserConfig) -> Tensor {
        Tensor::from_fn(&[cfg.chunk_tokens(), cfg.action_dim], |i| ((i as f64) * 0.377).cos())
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 1).unwrap();
        let a = net.predict_noise(&chunk(&cfg), 5, 10, &history(&cfg, 0.0)).unwrap();
        let b = net.predict_noise(&chunk(&cfg), 5, 10, &history(&cfg, 0.0)).unwrap();
        assert_eq!(a.shape(), &[cfg.chunk_tokens(), cfg.action_dim]);
        assert_eq!(a, b);
    }

    #[test]
    fn step_changes_output() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 2).unwrap();
        let a = net.predict_noise(&chunk(&cfg), 1, 100, &history(&cfg, 0.0)).unwrap();
        let b = net.predict_noise(&chunk(&cfg), 100, 100, &history(&cfg, 0.0)).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn step_range_is_checked() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 2).unwrap();
        assert!(matches!(
            net.predict_noise(&chunk(&cfg), 0, 10, &history(&cfg, 0.0)),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(net.predict_noise(&chunk(&cfg), 11, 10, &history(&cfg, 0.0)).is_err());
    }

    #[test]
    fn conditioning_reaches_output() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 3).unwrap();
        let a = net.predict_noise(&chunk(&cfg), 3, 10, &history(&cfg, 0.0)).unwrap();
        let zero = Tensor::zeros(&[cfg.num_frequencies, cfg.history_len, cfg.obs_dim()]);
        let b = net.predict_noise(&chunk(&cfg), 3, 10, &zero).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn encoder_is_shared_and_per_frequency() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 4).unwrap();
        // identical windows give identical features
        let frame = Tensor::from_fn(&[cfg.history_len, cfg.obs_dim()], |i| i as f64 * 0.1);
        let mut same = Vec::new();
        for _ in 0..cfg.num_frequencies {
            same.extend_from_slice(frame.data());
        }
        let same = Tensor::new(&[cfg.num_frequencies, cfg.history_len, cfg.obs_dim()], same);
        let f = net.encode_observations(&same).unwrap();
        assert_eq!(f.features.shape(), &[3, cfg.history_len, cfg.width]);
        assert_eq!(f.per_frequency(0), f.per_frequency(1));
        assert_eq!(f.per_frequency(1), f.per_frequency(2));
        // perturbing frequency 1 only moves feature 1
        let mut moved = same.clone();
        let n = cfg.history_len * cfg.obs_dim();
        moved.data_mut()[n] += 0.5;
        let g = net.encode_observations(&moved).unwrap();
        assert_eq!(f.per_frequency(0), g.per_frequency(0));
        assert_ne!(f.per_frequency(1), g.per_frequency(1));
        assert_eq!(f.per_frequency(2), g.per_frequency(2));
    }

    #[test]
    fn batched_prediction_matches_single() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 5).unwrap();
        let h = history(&cfg, 1.0);
        let obs = net.encode_observations(&h).unwrap();
        let c = chunk(&cfg);
        let mut data = c.data().to_vec();
        data.extend(c.data().iter().map(|v| -v));
        let batch = Tensor::new(&[2, cfg.chunk_tokens(), cfg.action_dim], data);
        let out = net.predict_noise_batch(&batch, 4, 10, &obs).unwrap();
        let single = net.predict_noise(&c, 4, 10, &h).unwrap();
        let first = &out.data()[..single.len()];
        let diff = first
            .iter()
            .zip(single.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn training_graph_matches_inference() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 6).unwrap();
        let h = history(&cfg, 2.0);
        let c = chunk(&cfg);
        let want = net.predict_noise(&c, 7, 10, &h).unwrap();
        let mut g = Graph::new(net.store());
        let x = g.input(c.clone().reshape(&[1, cfg.chunk_tokens(), cfg.action_dim]));
        let s = g.input(Tensor::new(&[1], vec![7.0]));
        let hv = g.input(h.clone().reshape(&[1, 3, cfg.history_len, cfg.obs_dim()]));
        let o = net.encode_graph(&mut g, hv);
        let y = net.forward(&mut g, x, s, o);
        assert!(g.value(y).clone().reshape(want.shape()).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = tiny();
        let a = Denoiser::new(cfg.clone(), 1).unwrap().num_parameters();
        let b = Denoiser::new(cfg.clone(), 99).unwrap().num_parameters();
        assert_eq!(a, b);
        let no_fusion = Denoiser::new(
            DenoiserConfig {
                fusion: false,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        assert!(no_fusion.num_parameters() < a);
        let high = Denoiser::new(
            DenoiserConfig {
                condition: ConditionMode::HighOnly,
                ..cfg
            },
            1,
        )
        .unwrap();
        assert_eq!(high.num_parameters(), a);
    }

    #[test]
    fn condition_modes_differ() {
        let cfg = tiny();
        let h = history(&cfg, 0.5);
        let c = chunk(&cfg);
        let full = Denoiser::new(cfg.clone(), 8).unwrap();
        let high = Denoiser::new(
            DenoiserConfig {
                condition: ConditionMode::HighOnly,
                ..cfg.clone()
            },
            8,
        )
        .unwrap();
        let a = full.predict_noise(&c, 2, 10, &h).unwrap();
        let b = high.predict_noise(&c, 2, 10, &h).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn single_frequency_without_fusion_runs() {
        let cfg = DenoiserConfig {
            num_frequencies: 1,
            fusion: false,
            chunk_len: 8,
            ..tiny()
        };
        let net = Denoiser::new(cfg.clone(), 1).unwrap();
        let out = net.predict_noise(&chunk(&cfg), 1, 5, &history(&cfg, 0.0)).unwrap();
        assert_eq!(out.shape(), &[8, 3]);
    }

    #[test]
    fn attention_weights_are_normalized() {
        let cfg = tiny();
        let net = Denoiser::new(cfg.clone(), 9).unwrap();
        let f = net.act_features(&chunk(&cfg), 3, &history(&cfg, 0.0)).unwrap();
        let w = f.attention.unwrap();
        let t = cfg.chunk_tokens();
        for row in w.data().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(f.fused.shape(), &[1, t, cfg.width]);
    }

    #[test]
    fn load_parameters_rejects_mismatch() {
        let cfg = tiny();
        let mut net = Denoiser::new(cfg.clone(), 1).unwrap();
        let params: Vec<(String, Tensor)> = net.store().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        net.load_parameters(params.clone()).unwrap();
        let mut bad = params;
        bad[0].1 = Tensor::zeros(&[1]);
        assert!(net.load_parameters(bad).is_err());
    }
}
