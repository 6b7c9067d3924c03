//! Flat run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::diffusion::{Clipping, DiffusionSchedule};
use crate::envbench::{task_ids, task_spec, ACTION_DIM, PROPRIO_DIM, VISUAL_DIM};
use crate::error::{Error, Result};
use crate::executor::{Gate, RolloutConfig};
use crate::network::{ConditionMode, DenoiserConfig};
use crate::temporal::FrequencyLadder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    pub tasks: Vec<String>,

    pub demos: usize,
    pub retry_budget: usize,

    pub batch_size: usize,
    pub epochs: usize,
    /// Caps gradient steps per epoch; by default an epoch is one pass worth of
    /// samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    /// Write a checkpoint every this many epochs (the final one is always
    /// written).
    pub checkpoint_every: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    /// Decay of the weight average used for inference; 0 disables it.
    pub ema_decay: f64,
    pub diffusion_steps: usize,
    pub clipping: Clipping,

    pub history_len: usize,
    pub chunk_len: usize,
    pub action_horizon: usize,
    pub strides: Vec<usize>,
    pub base_rate_hz: f64,
    /// The `M - 1` finite entropy thresholds, ascending.
    pub thresholds: Vec<f64>,
    pub samples: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub calibration_percentiles: Vec<f64>,

    pub width: usize,
    pub channel_mults: Vec<usize>,
    pub step_embed_dim: usize,
    pub heads: usize,
    pub encoder_hidden: usize,
    pub kernel: usize,
    pub groups: usize,
    pub condition: ConditionMode,
    pub fusion: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = DenoiserConfig::default();
        Self {
            seed: 0,
            data_root: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
            tasks: task_ids(),
            demos: 100,
            retry_budget: crate::dataset::DEFAULT_RETRY_BUDGET,
            batch_size: 128,
            epochs: 100,
            steps_per_epoch: None,
            checkpoint_every: 10,
            learning_rate: 1e-4,
            betas: [0.9, 0.999],
            weight_decay: 1e-6,
            ema_decay: 0.995,
            diffusion_steps: 100,
            clipping: Clipping::Denoised,
            history_len: 3,
            chunk_len: 8,
            action_horizon: 8,
            strides: vec![1, 2, 4],
            base_rate_hz: 15.0,
            thresholds: vec![-6.0, -5.5],
            samples: 100,
            eval_episodes: 100,
            eval_seed: 1_000_000,
            calibration_percentiles: vec![10.0, 70.0],
            width: net.width,
            channel_mults: net.channel_mults,
            step_embed_dim: net.step_embed_dim,
            heads: net.heads,
            encoder_hidden: net.encoder_hidden,
            kernel: net.kernel,
            groups: net.groups,
            condition: net.condition,
            fusion: net.fusion,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(source, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("serializing config: {e}")))
    }

    pub fn num_frequencies(&self) -> usize {
        self.strides.len()
    }

    pub fn ladder(&self) -> Result<FrequencyLadder> {
        FrequencyLadder::with_interior_thresholds(self.strides.clone(), self.base_rate_hz, &self.thresholds)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.width,
            channel_mults: self.channel_mults.clone(),
            step_embed_dim: self.step_embed_dim,
            heads: self.heads,
            num_frequencies: self.num_frequencies(),
            history_len: self.history_len,
            chunk_len: self.chunk_len,
            action_dim: ACTION_DIM,
            visual_dim: VISUAL_DIM,
            proprio_dim: PROPRIO_DIM,
            encoder_hidden: self.encoder_hidden,
            kernel: self.kernel,
            groups: self.groups,
            condition: self.condition,
            fusion: self.fusion && self.num_frequencies() > 1,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.betas[0],
            beta2: self.betas[1],
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::cosine(self.diffusion_steps)
    }

    pub fn rollout(&self, gate: Gate) -> RolloutConfig {
        RolloutConfig {
            action_horizon: self.action_horizon,
            samples: self.samples,
            gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for t in &self.tasks {
            task_spec(t)?;
        }
        let positive = [
            ("demos", self.demos),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("diffusion_steps", self.diffusion_steps),
            ("action_horizon", self.action_horizon),
            ("samples", self.samples),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.action_horizon > self.chunk_len {
            return bad(format!(
                "action_horizon {} exceeds chunk_len {}",
                self.action_horizon, self.chunk_len
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1): {}", self.ema_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1): {:?}", self.betas));
        }
        if self.calibration_percentiles.iter().any(|p| !(0.0..=100.0).contains(p))
            || self.calibration_percentiles.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "calibration percentiles must be ascending in [0, 100], got {:?}",
                self.calibration_percentiles
            ));
        }
        self.ladder()?;
        self.denoiser().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_table() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(
            (c.batch_size, c.history_len, c.action_horizon, c.chunk_len),
            (128, 3, 8, 8)
        );
        assert_eq!((c.learning_rate, c.weight_decay, c.betas), (1e-4, 1e-6, [0.9, 0.999]));
        assert_eq!(
            (c.step_embed_dim, c.diffusion_steps, c.num_frequencies(), c.samples),
            (128, 100, 3, 100)
        );
        assert_eq!(
            c.ladder().unwrap().thresholds(),
            &[f64::NEG_INFINITY, -6.0, -5.5, f64::INFINITY]
        );
        assert_eq!(c.calibration_percentiles, vec![10.0, 70.0]);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            seed: 7,
            strides: vec![1],
            thresholds: vec![],
            calibration_percentiles: vec![],
            condition: ConditionMode::LowOnly,
            ..Default::default()
        };
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert!(!back.denoiser().fusion);
    }

    #[test]
    fn partial_files_use_defaults_and_unknown_keys_fail() {
        let c = RunConfig::from_toml("epochs = 3\nwidth = 16\n", Path::new("x")).unwrap();
        assert_eq!((c.epochs, c.width, c.batch_size), (3, 16, 128));
        assert!(RunConfig::from_toml("epoch = 3\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("action_horizon = 9\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("tasks = [\"nope\"]\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("thresholds = [-5.0, -6.0]\n", Path::new("x")).is_err());
    }
}
