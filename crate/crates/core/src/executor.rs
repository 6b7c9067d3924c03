//! Entropy-gated execution: sample several chunks, estimate their spread,
//! pick an execution frequency and run the receding-horizon loop.
//!
//! Frequency indices are 0-based here: index 0 is the highest frequency
//! (stride 1).

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{normalize_history, NormalizationStats};
use crate::diffusion::{sample_tensor, Clipping, Conditioned, DiffusionSchedule};
use crate::envbench::{evaluate, Env, EpisodeOutcome, EvalReport, Status, TaskSpec, Vec2};
use crate::error::{Error, Result};
use crate::network::Denoiser;
use crate::temporal::{
    resample_history_frames, unflatten, Action, FrequencyLadder, HierarchicalChunk, HierarchicalHistory, Observation,
};

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const DEFAULT_ACTION_HORIZON: usize = 8;
pub const DEFAULT_SAMPLES: usize = 100;
pub const MIN_CALIBRATION_DECISIONS: usize = 100;

/// Gaussian entropy estimate of N sampled chunks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// `per_step[m][j]`: mean over action dimensions at frequency `m`,
    /// chunk position `j`.
    pub per_step: Vec<Vec<f64>>,
    pub overall: f64,
    pub n_samples: usize,
}

/// `log(sqrt(2 pi e) * sqrt(var))`, with `var` floored first.
pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var.max(VARIANCE_FLOOR)).ln()
}

/// Per-dimension unbiased variance across samples, turned into Gaussian
/// entropies and averaged over dimensions, then over all `(m, j)`.
pub fn estimate_entropy(samples: &[HierarchicalChunk]) -> Result<EntropyEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy needs at least 2 samples, got {n}"
        )));
    }
    let first = &samples[0];
    let (m_count, len, dim) = (first.num_frequencies(), first.len(), first.action_dim());
    for s in samples {
        if s.num_frequencies() != m_count
            || s.per_frequency
                .iter()
                .any(|seq| seq.len() != len || seq.iter().any(|a| a.dim() != dim))
        {
            return Err(Error::Shape("samples have different chunk shapes".into()));
        }
    }
    let per_step: Vec<Vec<f64>> = (0..m_count)
        .map(|m| {
            (0..len)
                .map(|j| {
                    (0..dim)
                        .map(|d| {
                            let mean = samples.iter().map(|s| s.per_frequency[m][j].0[d]).sum::<f64>() / n as f64;
                            let var = samples
                                .iter()
                                .map(|s| (s.per_frequency[m][j].0[d] - mean).powi(2))
                                .sum::<f64>()
                                / (n - 1) as f64;
                            gaussian_entropy(var)
                        })
                        .sum::<f64>()
                        / dim as f64
                })
                .collect()
        })
        .collect();
    let cells = (m_count * len) as f64;
    let overall = per_step.iter().flatten().sum::<f64>() / cells;
    Ok(EntropyEstimate {
        per_step,
        overall,
        n_samples: n,
    })
}

/// Index `k` with `h` in `(thresholds[k], thresholds[k + 1]]`.
pub fn select_frequency(h: f64, ladder: &FrequencyLadder) -> usize {
    let th = ladder.thresholds();
    (0..ladder.len())
        .find(|&k| h > th[k] && h <= th[k + 1])
        .unwrap_or(ladder.len() - 1)
}

/// How the execution frequency is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gate {
    Entropy,
    /// Always execute frequency `m`.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionDecision {
    pub selected_frequency: usize,
    /// The first sample's actions at the selected frequency.
    pub executed_actions: Vec<Action>,
    /// `None` when a fixed gate was used with a single sample.
    pub entropy: Option<EntropyEstimate>,
}

/// Gating over already drawn samples.
pub fn decide_from_samples(
    samples: &[HierarchicalChunk],
    ladder: &FrequencyLadder,
    gate: Gate,
) -> Result<ExecutionDecision> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    if first.num_frequencies() != ladder.len() {
        return Err(Error::Shape(format!(
            "chunk has {} frequencies, ladder has {}",
            first.num_frequencies(),
            ladder.len()
        )));
    }
    let entropy = match (gate, samples.len()) {
        (Gate::Fixed(_), 1) => None,
        _ => Some(estimate_entropy(samples)?),
    };
    let selected_frequency = match gate {
        Gate::Entropy => select_frequency(entropy.as_ref().map_or(f64::NAN, |e| e.overall), ladder),
        Gate::Fixed(m) if m < ladder.len() => m,
        Gate::Fixed(m) => {
            return Err(Error::InvalidArgument(format!(
                "frequency {m} outside ladder of {}",
                ladder.len()
            )))
        }
    };
    Ok(ExecutionDecision {
        selected_frequency,
        executed_actions: first.frequency(selected_frequency).to_vec(),
        entropy,
    })
}

/// Source of hierarchical chunks for the executor.
pub trait ChunkSampler {
    fn num_frequencies(&self) -> usize;
    fn history_len(&self) -> usize;
    /// Draws `n` chunks in one batched call, in the sampler's action space.
    fn sample_chunks(
        &self,
        history: &HierarchicalHistory,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<HierarchicalChunk>>;
    /// Maps a sampled action to an environment command.
    fn to_command(&self, action: &Action) -> Action {
        action.clone()
    }
}

/// A trained denoiser with its normalization and noise schedule.
#[derive(Clone, Debug)]
pub struct Policy {
    pub net: Denoiser,
    pub stats: NormalizationStats,
    pub schedule: DiffusionSchedule,
    pub clipping: Clipping,
}

impl ChunkSampler for Policy {
    fn num_frequencies(&self) -> usize {
        self.net.config().num_frequencies
    }

    fn history_len(&self) -> usize {
        self.net.config().history_len
    }

    /// Chunks are returned in normalized action space.
    fn sample_chunks(
        &self,
        history: &HierarchicalHistory,
        n: usize,
        mut rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<HierarchicalChunk>> {
        if n == 0 {
            return Err(Error::InvalidArgument("at least one sample is required".into()));
        }
        let cfg = self.net.config();
        let obs = self
            .net
            .encode_observations(&normalize_history(history, &self.stats).to_tensor())?;
        let model = Conditioned {
            net: &self.net,
            obs: &obs,
            max_step: self.schedule.steps(),
        };
        let out = sample_tensor(
            &model,
            &[n, cfg.chunk_tokens(), cfg.action_dim],
            &self.schedule,
            self.clipping,
            &mut rng,
        )?;
        let per = cfg.chunk_tokens() * cfg.action_dim;
        out.data()
            .chunks(per)
            .map(|c| {
                unflatten(
                    &Tensor::new(&[cfg.chunk_tokens(), cfg.action_dim], c.to_vec()),
                    cfg.num_frequencies,
                )
            })
            .collect()
    }

    fn to_command(&self, action: &Action) -> Action {
        self.stats.denormalize_action(action)
    }
}

/// Samples `n` chunks for `history` and applies `gate`.
pub fn decide(
    sampler: &impl ChunkSampler,
    history: &HierarchicalHistory,
    ladder: &FrequencyLadder,
    n: usize,
    gate: Gate,
    rng: &mut impl Rng,
) -> Result<ExecutionDecision> {
    if gate == Gate::Entropy && n < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy gating needs at least 2 samples, got {n}"
        )));
    }
    let samples = sampler.sample_chunks(history, n, rng)?;
    decide_from_samples(&samples, ladder, gate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Actions executed per decision.
    pub action_horizon: usize,
    pub samples: usize,
    pub gate: Gate,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            action_horizon: DEFAULT_ACTION_HORIZON,
            samples: DEFAULT_SAMPLES,
            gate: Gate::Entropy,
        }
    }
}

/// One decision of a rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision_index: usize,
    /// Base step at which the decision was taken.
    pub base_step: usize,
    pub entropy: Option<f64>,
    pub frequency_index: usize,
    pub stride: usize,
    /// Commands actually sent.
    pub commands: Vec<Vec<f64>>,
    pub effector: Vec2,
    pub gripper: f64,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    pub executed_commands: usize,
    pub base_steps_elapsed: usize,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub decisions: Vec<DecisionRecord>,
    pub summary: RolloutSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Decision(DecisionRecord),
    Summary(RolloutSummary),
}

impl RolloutTrace {
    pub fn outcome(&self) -> EpisodeOutcome {
        EpisodeOutcome {
            seed: self.summary.seed,
            success: self.summary.success,
            executed_commands: self.summary.executed_commands,
            base_steps_elapsed: self.summary.base_steps_elapsed,
            aborted: self.summary.aborted.clone(),
        }
    }

    pub fn entropies(&self) -> impl Iterator<Item = f64> + '_ {
        self.decisions.iter().filter_map(|d| d.entropy)
    }

    /// One JSON record per decision, then one summary record.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("writing trace", e);
        for d in &self.decisions {
            serde_json::to_writer(&mut w, &TraceLine::Decision(d.clone()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        serde_json::to_writer(&mut w, &TraceLine::Summary(self.summary.clone()))?;
        w.write_all(b"\n").map_err(io)
    }

    pub fn read_jsonl(r: impl BufRead, source: &Path) -> Result<Self> {
        let mut decisions = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", source.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|e| Error::format(source, format!("line {}: {e}", i + 1)))?;
            match parsed {
                TraceLine::Decision(d) if summary.is_none() => decisions.push(d),
                TraceLine::Decision(_) => return Err(Error::format(source, "decision after summary")),
                TraceLine::Summary(s) if summary.is_none() => summary = Some(s),
                TraceLine::Summary(_) => return Err(Error::format(source, "duplicate summary")),
            }
        }
        let summary = summary.ok_or_else(|| Error::format(source, "missing summary record"))?;
        Ok(Self { decisions, summary })
    }
}

/// Closed-loop receding-horizon execution until the episode terminates or the
/// step budget runs out. A non-finite state or sampler failure ends the
/// rollout with `aborted` set and the trace so far preserved.
pub fn rollout(
    sampler: &impl ChunkSampler,
    env: &mut Env,
    ladder: &FrequencyLadder,
    config: &RolloutConfig,
    rng: &mut impl Rng,
) -> Result<RolloutTrace> {
    if ladder.len() != sampler.num_frequencies() {
        return Err(Error::Shape(format!(
            "ladder has {} frequencies, policy has {}",
            ladder.len(),
            sampler.num_frequencies()
        )));
    }
    if config.action_horizon == 0 {
        return Err(Error::InvalidArgument("action horizon must be at least 1".into()));
    }
    let mut frames: Vec<Observation> = vec![env.observe()];
    let mut decisions = Vec::new();
    let mut executed_commands = 0;
    let start_step = env.state().step;
    let mut aborted = None;
    while env.status() == Status::Running && !env.budget_exhausted() {
        let t = frames.len() - 1;
        let history = resample_history_frames(&frames, t, ladder, sampler.history_len())?;
        let decision = match decide(sampler, &history, ladder, config.samples, config.gate, rng) {
            Ok(d) => d,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        };
        if config.action_horizon > decision.executed_actions.len() {
            return Err(Error::InvalidArgument(format!(
                "action horizon {} exceeds chunk length {}",
                config.action_horizon,
                decision.executed_actions.len()
            )));
        }
        let stride = ladder.stride(decision.selected_frequency);
        let mut record = DecisionRecord {
            decision_index: decisions.len(),
            base_step: env.state().step,
            entropy: decision.entropy.as_ref().map(|e| e.overall),
            frequency_index: decision.selected_frequency,
            stride,
            commands: Vec::new(),
            effector: env.state().effector,
            gripper: env.state().gripper,
            stage: env.state().stage,
        };
        for action in &decision.executed_actions[..config.action_horizon] {
            if env.status() != Status::Running || env.budget_exhausted() {
                break;
            }
            let command = sampler.to_command(action);
            match env.step(&command, stride) {
                Ok(obs) => frames.extend(obs),
                Err(e) => {
                    aborted = Some(e.to_string());
                    break;
                }
            }
            executed_commands += 1;
            record.commands.push(command.0);
        }
        decisions.push(record);
        if aborted.is_some() {
            break;
        }
    }
    Ok(RolloutTrace {
        decisions,
        summary: RolloutSummary {
            task_id: env.spec().task_id.clone(),
            seed: env.seed(),
            success: aborted.is_none() && env.status() == Status::Success,
            executed_commands,
            base_steps_elapsed: env.state().step - start_step,
            aborted,
        },
    })
}

/// Generator for the policy side of the episode with environment seed
/// `seed`. It runs on its own stream so it never mirrors the scene draw.
pub fn rollout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Rolls `sampler` out on `episodes` consecutive seeds starting at
/// `first_seed`. Every trace is passed to `on_trace` before the next episode
/// starts.
pub fn evaluate_policy(
    sampler: &impl ChunkSampler,
    spec: &TaskSpec,
    ladder: &FrequencyLadder,
    config: &RolloutConfig,
    episodes: usize,
    first_seed: u64,
    mut on_trace: impl FnMut(&RolloutTrace) -> Result<()>,
) -> Result<EvalReport> {
    let mut sink_error = None;
    let report = evaluate(spec, episodes, first_seed, |spec, seed| {
        let mut env = Env::reset(spec, seed)?;
        let trace = rollout(sampler, &mut env, ladder, config, &mut rollout_rng(seed))?;
        if sink_error.is_none() {
            sink_error = on_trace(&trace).err();
        }
        Ok(trace.outcome())
    })?;
    match sink_error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "percentile {p} of {} values",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Interior thresholds from entropy percentiles. A three-frequency ladder
/// takes two percentiles (10 and 70 by default).
pub fn calibrate_thresholds(entropies: &[f64], percentiles: &[f64]) -> Result<Vec<f64>> {
    if entropies.len() < MIN_CALIBRATION_DECISIONS {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least {MIN_CALIBRATION_DECISIONS} decisions, got {}",
            entropies.len()
        )));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFinite("entropy sample".into()));
    }
    let out = percentiles
        .iter()
        .map(|&p| percentile(entropies, p))
        .collect::<Result<Vec<_>>>()?;
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "percentile thresholds are not increasing: {out:?}"
        )));
    }
    Ok(out)
}
