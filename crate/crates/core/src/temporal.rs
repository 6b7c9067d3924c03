//! Frequency ladder and resampling of base-rate streams into per-frequency
//! observation histories and action chunks.
//!
//! Frequency index `m` is zero-based here; `m = 0` is stride 1, the highest
//! frequency. Out-of-range indices are clamped to the episode edges.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::EpisodeRecord;
use crate::error::{Error, Result};

/// One base-rate observation: scene state plus proprioception.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visual: Vec<f64>,
    pub proprio: Vec<f64>,
}

impl Observation {
    pub fn new(visual: Vec<f64>, proprio: Vec<f64>) -> Self {
        Self { visual, proprio }
    }

    pub fn dim(&self) -> usize {
        self.visual.len() + self.proprio.len()
    }

    /// `visual ++ proprio`.
    pub fn concat(&self) -> impl Iterator<Item = f64> + '_ {
        self.visual.iter().chain(&self.proprio).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.concat().all(f64::is_finite)
    }
}

/// One low-level command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Sampling strides (ascending, starting at 1) and the ascending entropy
/// thresholds that gate them, with `-inf`/`+inf` sentinels at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LadderRepr", into = "LadderRepr")]
pub struct FrequencyLadder {
    strides: Vec<usize>,
    base_rate_hz: f64,
    thresholds: Vec<f64>,
}

/// Serialized form; the infinite sentinels are implicit.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LadderRepr {
    strides: Vec<usize>,
    base_rate_hz: f64,
    interior_thresholds: Vec<f64>,
}

impl TryFrom<LadderRepr> for FrequencyLadder {
    type Error = Error;

    fn try_from(r: LadderRepr) -> Result<Self> {
        FrequencyLadder::with_interior_thresholds(r.strides, r.base_rate_hz, &r.interior_thresholds)
    }
}

impl From<FrequencyLadder> for LadderRepr {
    fn from(l: FrequencyLadder) -> Self {
        let interior = l.thresholds[1..l.thresholds.len() - 1].to_vec();
        LadderRepr {
            strides: l.strides,
            base_rate_hz: l.base_rate_hz,
            interior_thresholds: interior,
        }
    }
}

impl FrequencyLadder {
    pub fn new(strides: Vec<usize>, base_rate_hz: f64, thresholds: Vec<f64>) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::Ladder("at least one stride is required".into()));
        }
        if strides[0] != 1 {
            return Err(Error::Ladder(format!("first stride must be 1, got {}", strides[0])));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Ladder(format!(
                "strides must be strictly ascending: {strides:?}"
            )));
        }
        if thresholds.len() != strides.len() + 1 {
            return Err(Error::Ladder(format!(
                "{} strides need {} thresholds, got {}",
                strides.len(),
                strides.len() + 1,
                thresholds.len()
            )));
        }
        if thresholds[0] != f64::NEG_INFINITY || *thresholds.last().unwrap() != f64::INFINITY {
            return Err(Error::Ladder("thresholds must start at -inf and end at +inf".into()));
        }
        if thresholds.iter().any(|v| v.is_nan()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Ladder(format!(
                "thresholds must be strictly ascending: {thresholds:?}"
            )));
        }
        if !(base_rate_hz.is_finite() && base_rate_hz > 0.0) {
            return Err(Error::Ladder(format!("base rate must be positive, got {base_rate_hz}")));
        }
        Ok(Self {
            strides,
            base_rate_hz,
            thresholds,
        })
    }

    /// Builds a ladder from the `M - 1` finite thresholds.
    pub fn with_interior_thresholds(strides: Vec<usize>, base_rate_hz: f64, interior: &[f64]) -> Result<Self> {
        let mut thresholds = Vec::with_capacity(interior.len() + 2);
        thresholds.push(f64::NEG_INFINITY);
        thresholds.extend_from_slice(interior);
        thresholds.push(f64::INFINITY);
        Self::new(strides, base_rate_hz, thresholds)
    }

    /// Strides {1, 2, 4} at 15 Hz with thresholds {-inf, -6.0, -5.5, +inf}.
    pub fn standard() -> Self {
        Self::with_interior_thresholds(vec![1, 2, 4], 15.0, &[-6.0, -5.5]).expect("standard ladder is valid")
    }

    /// Single stride-1 frequency; gating is a no-op.
    pub fn single(base_rate_hz: f64) -> Self {
        Self::with_interior_thresholds(vec![1], base_rate_hz, &[]).expect("single ladder is valid")
    }

    /// Number of frequencies `M`.
    pub fn len(&self) -> usize {
        self.strides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strides.is_empty()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn stride(&self, m: usize) -> usize {
        self.strides[m]
    }

    pub fn base_rate_hz(&self) -> f64 {
        self.base_rate_hz
    }

    pub fn rate_hz(&self, m: usize) -> f64 {
        self.base_rate_hz / self.strides[m] as f64
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn interior_thresholds(&self) -> &[f64] {
        &self.thresholds[1..self.thresholds.len() - 1]
    }

    /// Same strides, new interior thresholds.
    pub fn retuned(&self, interior: &[f64]) -> Result<Self> {
        Self::with_interior_thresholds(self.strides.clone(), self.base_rate_hz, interior)
    }
}

/// Base-step indices of a history window: `t - (L_h-1)*s, ..., t - s, t`,
/// clamped at 0.
pub fn history_indices(t: usize, stride: usize, history_len: usize) -> Vec<usize> {
    (0..history_len)
        .map(|i| t.saturating_sub((history_len - 1 - i) * stride))
        .collect()
}

/// Base-step indices of an action chunk: `t, t + s, ..., t + (L_c-1)*s`,
/// clamped to `last`.
pub fn chunk_indices(t: usize, stride: usize, chunk_len: usize, last: usize) -> Vec<usize> {
    (0..chunk_len).map(|i| (t + i * stride).min(last)).collect()
}

/// `M` observation windows of equal length, most recent frame last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalHistory {
    pub per_frequency: Vec<Vec<Observation>>,
}

impl HierarchicalHistory {
    pub fn num_frequencies(&self) -> usize {
        self.per_frequency.len()
    }

    pub fn len(&self) -> usize {
        self.per_frequency.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.per_frequency
            .first()
            .and_then(|f| f.first())
            .map_or(0, Observation::dim)
    }

    /// `[M, L_h, obs_dim]` with each frame laid out as `visual ++ proprio`.
    pub fn to_tensor(&self) -> Tensor {
        let (m, l, d) = (self.num_frequencies(), self.len(), self.obs_dim());
        let data: Vec<f64> = self
            .per_frequency
            .iter()
            .flat_map(|seq| seq.iter().flat_map(Observation::concat))
            .collect();
        Tensor::new(&[m, l, d], data)
    }
}

/// `M` action sequences of equal length `L_c`, stored m-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalChunk {
    pub per_frequency: Vec<Vec<Action>>,
}

impl HierarchicalChunk {
    pub fn num_frequencies(&self) -> usize {
        self.per_frequency.len()
    }

    pub fn len(&self) -> usize {
        self.per_frequency.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.per_frequency
            .first()
            .and_then(|f| f.first())
            .map_or(0, Action::dim)
    }

    pub fn frequency(&self, m: usize) -> &[Action] {
        &self.per_frequency[m]
    }
}

/// Resamples a base-rate observation stream into a hierarchical history.
pub fn resample_history_frames(
    frames: &[Observation],
    t: usize,
    ladder: &FrequencyLadder,
    history_len: usize,
) -> Result<HierarchicalHistory> {
    if history_len == 0 {
        return Err(Error::InvalidArgument("history length must be >= 1".into()));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty episode".into()));
    }
    let t = t.min(frames.len() - 1);
    let per_frequency = ladder
        .strides()
        .iter()
        .map(|&s| {
            history_indices(t, s, history_len)
                .into_iter()
                .map(|i| frames[i].clone())
                .collect()
        })
        .collect();
    Ok(HierarchicalHistory { per_frequency })
}

/// Resamples a base-rate action stream into a hierarchical chunk.
pub fn resample_chunk_actions(
    actions: &[Action],
    t: usize,
    ladder: &FrequencyLadder,
    chunk_len: usize,
) -> Result<HierarchicalChunk> {
    if chunk_len == 0 {
        return Err(Error::InvalidArgument("chunk length must be >= 1".into()));
    }
    if actions.is_empty() {
        return Err(Error::InvalidArgument("cannot resample an empty action stream".into()));
    }
    let last = actions.len() - 1;
    let per_frequency = ladder
        .strides()
        .iter()
        .map(|&s| {
            chunk_indices(t, s, chunk_len, last)
                .into_iter()
                .map(|i| actions[i].clone())
                .collect()
        })
        .collect();
    Ok(HierarchicalChunk { per_frequency })
}

pub fn resample_history(
    episode: &EpisodeRecord,
    t: usize,
    ladder: &FrequencyLadder,
    history_len: usize,
) -> Result<HierarchicalHistory> {
    resample_history_frames(&episode.observations, t, ladder, history_len)
}

pub fn resample_chunk(
    episode: &EpisodeRecord,
    t: usize,
    ladder: &FrequencyLadder,
    chunk_len: usize,
) -> Result<HierarchicalChunk> {
    resample_chunk_actions(&episode.actions, t, ladder, chunk_len)
}

/// `[M * L_c, D_a]`, frequency-major then time.
pub fn flatten(chunk: &HierarchicalChunk) -> Result<Tensor> {
    let (m, l, d) = (chunk.num_frequencies(), chunk.len(), chunk.action_dim());
    let mut data = Vec::with_capacity(m * l * d);
    for seq in &chunk.per_frequency {
        if seq.len() != l {
            return Err(Error::Shape(format!("ragged chunk: {} vs {l} actions", seq.len())));
        }
        for a in seq {
            if a.dim() != d {
                return Err(Error::Shape(format!("action dim {} vs {d}", a.dim())));
            }
            data.extend_from_slice(a.as_slice());
        }
    }
    Ok(Tensor::new(&[m * l, d], data))
}

/// Inverse of [`flatten`] for a chunk with `num_frequencies` sequences.
pub fn unflatten(flat: &Tensor, num_frequencies: usize) -> Result<HierarchicalChunk> {
    if flat.rank() != 2 {
        return Err(Error::Shape(format!("expected [M*L_c, D_a], got {:?}", flat.shape())));
    }
    let (rows, d) = (flat.dim(0), flat.dim(1));
    if num_frequencies == 0 || rows % num_frequencies != 0 {
        return Err(Error::Shape(format!(
            "{rows} rows do not split into {num_frequencies} frequencies"
        )));
    }
    let l = rows / num_frequencies;
    let per_frequency = flat
        .data()
        .chunks(l * d.max(1))
        .map(|seq| seq.chunks(d.max(1)).map(|a| Action(a.to_vec())).collect())
        .collect();
    Ok(HierarchicalChunk { per_frequency })
}
