//! Scripted demonstrations, normalization and training batches.
//!
//! On disk a dataset is `<root>/<task_id>/episode_<n>.bin` (see [`crate::io`]
//! for the container layout) plus `<root>/<task_id>/stats.json`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::envbench::{run_expert, Status, TaskSpec};
use crate::error::{Error, Result};
use crate::io::{read_container, write_container};
use crate::temporal::{
    flatten, resample_chunk, resample_history, Action, FrequencyLadder, HierarchicalChunk, HierarchicalHistory,
    Observation,
};

pub const EPISODE_MAGIC: &[u8; 4] = b"MCEP";
pub const EPISODE_VERSION: u32 = 1;
pub const STATS_VERSION: u32 = 1;
/// Half-width added to degenerate normalization ranges.
pub const DEGENERATE_WIDTH: f64 = 1e-6;
pub const DEFAULT_RETRY_BUDGET: usize = 20;

/// One demonstration at the base rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub task_id: String,
    pub success: bool,
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.observations.is_empty() || self.observations.len() != self.actions.len() {
            return Err(Error::InvalidArgument(format!(
                "episode has {} observations and {} actions",
                self.observations.len(),
                self.actions.len()
            )));
        }
        Ok(())
    }
}

/// Runs the scripted expert until `count` successful episodes are collected.
/// Episode seeds are drawn from a generator seeded with `seed`; a failed run is
/// discarded and the next seed is tried, up to `retry_budget` consecutive
/// failures.
pub fn generate_demos(spec: &TaskSpec, count: usize, seed: u64, retry_budget: usize) -> Result<Vec<EpisodeRecord>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut failures = 0;
    while out.len() < count {
        let episode_seed: u64 = seeds.random::<u64>() >> 11;
        let (observations, actions, env) = run_expert(spec, episode_seed)?;
        if env.status() != Status::Success || observations.is_empty() {
            failures += 1;
            if failures > retry_budget {
                return Err(Error::RetryBudgetExhausted {
                    task: spec.task_id.clone(),
                    attempts: failures,
                });
            }
            continue;
        }
        failures = 0;
        out.push(EpisodeRecord {
            observations,
            actions,
            task_id: spec.task_id.clone(),
            success: true,
            seed: episode_seed,
        });
    }
    Ok(out)
}

/// Per-dimension `[min, max]` range mapped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    /// Range over `rows`; dimensions with `max - min < 1e-6` are widened by
    /// `1e-6` on each side.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("no data to normalize".into()))?;
        let (mut min, mut max) = (first.to_vec(), first.to_vec());
        for row in it {
            if row.len() != min.len() {
                return Err(Error::Shape(format!("row of length {} vs {}", row.len(), min.len())));
            }
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        for (lo, hi) in min.iter_mut().zip(max.iter_mut()) {
            if *hi - *lo < DEGENERATE_WIDTH {
                *lo -= DEGENERATE_WIDTH;
                *hi += DEGENERATE_WIDTH;
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| (v + 1.0) * 0.5 * (hi - lo) + lo)
            .collect()
    }
}

/// Normalization shared by every frequency (all index one base stream).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub schema_version: u32,
    pub visual: MinMax,
    pub proprio: MinMax,
    pub action: MinMax,
}

impl NormalizationStats {
    pub fn normalize_observation(&self, o: &Observation) -> Observation {
        Observation::new(self.visual.normalize(&o.visual), self.proprio.normalize(&o.proprio))
    }

    pub fn denormalize_observation(&self, o: &Observation) -> Observation {
        Observation::new(self.visual.denormalize(&o.visual), self.proprio.denormalize(&o.proprio))
    }

    pub fn normalize_action(&self, a: &Action) -> Action {
        Action(self.action.normalize(&a.0))
    }

    pub fn denormalize_action(&self, a: &Action) -> Action {
        Action(self.action.denormalize(&a.0))
    }

    pub fn obs_dims(&self) -> (usize, usize) {
        (self.visual.dim(), self.proprio.dim())
    }

    pub fn action_dim(&self) -> usize {
        self.action.dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let stats: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if stats.schema_version != STATS_VERSION {
            return Err(Error::format(path, format!("schema version {}", stats.schema_version)));
        }
        Ok(stats)
    }
}

/// Min-max statistics over the given (training) episodes.
pub fn fit_normalizer(episodes: &[EpisodeRecord]) -> Result<NormalizationStats> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit a normalizer on zero episodes".into(),
        ));
    }
    let obs = || episodes.iter().flat_map(|e| &e.observations);
    Ok(NormalizationStats {
        schema_version: STATS_VERSION,
        visual: MinMax::fit(obs().map(|o| o.visual.as_slice()))?,
        proprio: MinMax::fit(obs().map(|o| o.proprio.as_slice()))?,
        action: MinMax::fit(episodes.iter().flat_map(|e| &e.actions).map(|a| a.as_slice()))?,
    })
}

/// A normalized `(history, chunk)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub history: HierarchicalHistory,
    pub chunk: HierarchicalChunk,
    pub t: usize,
    pub episode_id: usize,
}

pub fn normalize_history(h: &HierarchicalHistory, stats: &NormalizationStats) -> HierarchicalHistory {
    HierarchicalHistory {
        per_frequency: h
            .per_frequency
            .iter()
            .map(|seq| seq.iter().map(|o| stats.normalize_observation(o)).collect())
            .collect(),
    }
}

pub fn normalize_chunk(c: &HierarchicalChunk, stats: &NormalizationStats) -> HierarchicalChunk {
    HierarchicalChunk {
        per_frequency: c
            .per_frequency
            .iter()
            .map(|seq| seq.iter().map(|a| stats.normalize_action(a)).collect())
            .collect(),
    }
}

pub fn denormalize_chunk(c: &HierarchicalChunk, stats: &NormalizationStats) -> HierarchicalChunk {
    HierarchicalChunk {
        per_frequency: c
            .per_frequency
            .iter()
            .map(|seq| seq.iter().map(|a| stats.denormalize_action(a)).collect())
            .collect(),
    }
}

/// Draws `batch` pairs `(episode, t)` uniformly over all base indices of all
/// episodes.
pub fn sample_batch(
    episodes: &[EpisodeRecord],
    stats: &NormalizationStats,
    ladder: &FrequencyLadder,
    history_len: usize,
    chunk_len: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    for e in episodes {
        e.validate()?;
    }
    let total: usize = episodes.iter().map(EpisodeRecord::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no episodes to sample from".into()));
    }
    (0..batch)
        .map(|_| {
            let mut idx = rng.random_range(0..total);
            let mut episode_id = 0;
            while idx >= episodes[episode_id].len() {
                idx -= episodes[episode_id].len();
                episode_id += 1;
            }
            let e = &episodes[episode_id];
            let history = resample_history(e, idx, ladder, history_len)?;
            let chunk = resample_chunk(e, idx, ladder, chunk_len)?;
            Ok(TrainingSample {
                history: normalize_history(&history, stats),
                chunk: normalize_chunk(&chunk, stats),
                t: idx,
                episode_id,
            })
        })
        .collect()
}

/// Batch tensors: history `[B, M, L_h, obs]`, chunk `[B, M*L_c, D_a]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub history: Tensor,
    pub chunk: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[TrainingSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (m, lh, od) = (
            first.history.num_frequencies(),
            first.history.len(),
            first.history.obs_dim(),
        );
        let (lc, ad) = (first.chunk.len(), first.chunk.action_dim());
        let mut history = Vec::with_capacity(samples.len() * m * lh * od);
        let mut chunk = Vec::with_capacity(samples.len() * m * lc * ad);
        for s in samples {
            history.extend_from_slice(s.history.to_tensor().data());
            chunk.extend_from_slice(flatten(&s.chunk)?.data());
        }
        let b = samples.len();
        Ok(Self {
            history: Tensor::new(&[b, m, lh, od], history),
            chunk: Tensor::new(&[b, m * lc, ad], chunk),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    task_id: String,
    success: bool,
    seed: u64,
    len: usize,
    visual_dim: usize,
    proprio_dim: usize,
    action_dim: usize,
}

pub fn task_dir(root: &Path, task_id: &str) -> PathBuf {
    root.join(task_id)
}

pub fn episode_path(root: &Path, task_id: &str, n: usize) -> PathBuf {
    task_dir(root, task_id).join(format!("episode_{n}.bin"))
}

pub fn stats_path(root: &Path, task_id: &str) -> PathBuf {
    task_dir(root, task_id).join("stats.json")
}

pub fn save_episode(path: &Path, e: &EpisodeRecord) -> Result<()> {
    e.validate()?;
    let o = &e.observations[0];
    let header = EpisodeHeader {
        task_id: e.task_id.clone(),
        success: e.success,
        seed: e.seed,
        len: e.len(),
        visual_dim: o.visual.len(),
        proprio_dim: o.proprio.len(),
        action_dim: e.actions[0].dim(),
    };
    let mut payload = Vec::new();
    for o in &e.observations {
        if o.visual.len() != header.visual_dim || o.proprio.len() != header.proprio_dim {
            return Err(Error::Shape("ragged observations".into()));
        }
        payload.extend(o.concat());
    }
    for a in &e.actions {
        if a.dim() != header.action_dim {
            return Err(Error::Shape("ragged actions".into()));
        }
        payload.extend_from_slice(a.as_slice());
    }
    write_container(path, EPISODE_MAGIC, EPISODE_VERSION, &header, &payload)
}

pub fn load_episode(path: &Path) -> Result<EpisodeRecord> {
    let (h, payload): (EpisodeHeader, Vec<f64>) = read_container(path, EPISODE_MAGIC, EPISODE_VERSION)?;
    let od = h.visual_dim + h.proprio_dim;
    if payload.len() != h.len * (od + h.action_dim) {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let (obs, act) = payload.split_at(h.len * od);
    Ok(EpisodeRecord {
        observations: obs
            .chunks(od)
            .map(|r| Observation::new(r[..h.visual_dim].to_vec(), r[h.visual_dim..].to_vec()))
            .collect(),
        actions: act.chunks(h.action_dim.max(1)).map(|r| Action(r.to_vec())).collect(),
        task_id: h.task_id,
        success: h.success,
        seed: h.seed,
    })
}

/// Writes episodes and their statistics under `root/<task_id>/`. Refuses to
/// touch an existing dataset unless `force`.
pub fn save_dataset(root: &Path, task_id: &str, episodes: &[EpisodeRecord], force: bool) -> Result<NormalizationStats> {
    let dir = task_dir(root, task_id);
    if dir.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "dataset {} already exists (use --force to overwrite)",
            dir.display()
        )));
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (n, e) in episodes.iter().enumerate() {
        save_episode(&episode_path(root, task_id, n), e)?;
    }
    let stats = fit_normalizer(episodes)?;
    stats.save(&stats_path(root, task_id))?;
    Ok(stats)
}

/// Loads every `episode_<n>.bin` of a task in index order, plus its stats.
pub fn load_dataset(root: &Path, task_id: &str) -> Result<(Vec<EpisodeRecord>, NormalizationStats)> {
    let dir = task_dir(root, task_id);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("episode_").and_then(|r| r.strip_suffix(".bin")) {
            let n: usize = n
                .parse()
                .map_err(|_| Error::format(entry.path(), "bad episode index"))?;
            indexed.push((n, entry.path()));
        }
    }
    if indexed.is_empty() {
        return Err(Error::InvalidArgument(format!("no episodes in {}", dir.display())));
    }
    indexed.sort();
    let episodes = indexed
        .iter()
        .map(|(_, p)| load_episode(p))
        .collect::<Result<Vec<_>>>()?;
    let stats = NormalizationStats::load(&stats_path(root, task_id))?;
    Ok((episodes, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envbench::task_spec;
    use proptest::prelude::*;

    fn demos(n: usize) -> Vec<EpisodeRecord> {
        generate_demos(&task_spec("approach_insert").unwrap(), n, 0, DEFAULT_RETRY_BUDGET).unwrap()
    }

    #[test]
    fn demos_are_successful_and_deterministic() {
        let a = demos(100);
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|e| e.success && e.task_id == "approach_insert"));
        assert_eq!(a, demos(100));
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_demos(&task_spec("latch_close").unwrap(), 0, 0, 5).is_err());
    }

    #[test]
    fn retry_budget_exhaustion() {
        let mut spec = task_spec("latch_close").unwrap();
        spec.max_base_steps = 5;
        assert!(matches!(
            generate_demos(&spec, 1, 0, 3),
            Err(Error::RetryBudgetExhausted { attempts: 4, .. })
        ));
    }

    #[test]
    fn min_max_extremes_and_constant_dims() {
        let rows = [vec![0.0, 5.0, 2.0], vec![1.0, 5.0, -2.0]];
        let mm = MinMax::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(mm.normalize(&[0.0, 5.0, -2.0]), vec![-1.0, 0.0, -1.0]);
        assert_eq!(mm.normalize(&[1.0, 5.0, 2.0]), vec![1.0, 0.0, 1.0]);
        assert!(MinMax::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn normalizer_requires_episodes() {
        assert!(fit_normalizer(&[]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_round_trips(
            lo in -10.0f64..10.0,
            width in 0.0f64..5.0,
            xs in proptest::collection::vec(-20.0f64..20.0, 1..10),
        ) {
            let rows = [vec![lo; xs.len()], vec![lo + width; xs.len()]];
            let mm = MinMax::fit(rows.iter().map(|r| r.as_slice())).unwrap();
            let back = mm.denormalize(&mm.normalize(&xs));
            for (a, b) in back.iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn batch_shapes_and_range() {
        let eps = demos(5);
        let stats = fit_normalizer(&eps).unwrap();
        let ladder = FrequencyLadder::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = sample_batch(&eps, &stats, &ladder, 3, 8, 128, &mut rng).unwrap();
        assert_eq!(samples.len(), 128);
        for s in &samples {
            assert_eq!(s.history.num_frequencies(), 3);
            assert_eq!(s.history.len(), 3);
            assert_eq!(s.chunk.len(), 8);
            assert_eq!(s.chunk.action_dim(), 3);
            for a in s.chunk.per_frequency.iter().flatten() {
                assert!(a.0.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            }
        }
        let b = Batch::from_samples(&samples).unwrap();
        assert_eq!(b.history.shape(), &[128, 3, 3, 9]);
        assert_eq!(b.chunk.shape(), &[128, 24, 3]);
        let again = sample_batch(&eps, &stats, &ladder, 3, 8, 128, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn single_step_episode_gives_clamped_samples() {
        let mut e = demos(1).remove(0);
        e.observations.truncate(1);
        e.actions.truncate(1);
        let stats = fit_normalizer(std::slice::from_ref(&e)).unwrap();
        let ladder = FrequencyLadder::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in sample_batch(std::slice::from_ref(&e), &stats, &ladder, 3, 8, 10, &mut rng).unwrap() {
            assert_eq!(s.t, 0);
            let frame = &s.history.per_frequency[0][0];
            assert!(s.history.per_frequency.iter().flatten().all(|o| o == frame));
            let act = &s.chunk.per_frequency[0][0];
            assert!(s.chunk.per_frequency.iter().flatten().all(|a| a == act));
        }
    }

    #[test]
    fn uniform_coverage_within_binomial_bounds() {
        let mut e = demos(1).remove(0);
        e.observations.truncate(20);
        e.actions.truncate(20);
        let t_len = e.len();
        let stats = fit_normalizer(std::slice::from_ref(&e)).unwrap();
        let ladder = FrequencyLadder::single(15.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut counts = vec![0usize; t_len];
        for s in sample_batch(std::slice::from_ref(&e), &stats, &ladder, 1, 1, draws, &mut rng).unwrap() {
            counts[s.t] += 1;
        }
        let p = 1.0 / t_len as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd + 1.0, "count {c}");
        }
    }

    #[test]
    fn dataset_round_trips_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let eps = demos(3);
        let stats = save_dataset(dir.path(), "approach_insert", &eps, false).unwrap();
        assert!(save_dataset(dir.path(), "approach_insert", &eps, false).is_err());
        let (back, back_stats) = load_dataset(dir.path(), "approach_insert").unwrap();
        assert_eq!(back, eps);
        assert_eq!(back_stats, stats);
        save_dataset(dir.path(), "approach_insert", &eps[..1], true).unwrap();
        assert_eq!(load_dataset(dir.path(), "approach_insert").unwrap().0.len(), 1);
    }
}
