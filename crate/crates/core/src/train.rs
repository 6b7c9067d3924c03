//! Denoiser training with AdamW on uniformly drawn `(history, chunk)` pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Graph, ParamStore};
use crate::config::RunConfig;
use crate::dataset::{sample_batch, Batch, EpisodeRecord, NormalizationStats};
use crate::diffusion::{noise_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::network::Denoiser;
use crate::temporal::FrequencyLadder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based; continues across resumed runs.
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Network, optimizer and progress of one training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Denoiser,
    pub optimizer: AdamW,
    /// Exponential moving average of the weights; this is what policies use.
    pub ema: ParamStore,
    pub epochs_done: usize,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let net = Denoiser::new(cfg.denoiser(), cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer(), net.store());
        Ok(Self {
            ema: net.store().clone(),
            net,
            optimizer,
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    /// The network with its averaged weights.
    pub fn ema_net(&self) -> Denoiser {
        let mut net = self.net.clone();
        *net.store_mut() = self.ema.clone();
        net
    }
}

/// `ema <- d * ema + (1 - d) * params`, with `d` warmed up as
/// `min(decay, (1 + n) / (10 + n))` over optimizer steps `n`.
pub fn update_ema(ema: &mut ParamStore, params: &ParamStore, decay: f64, steps: u64) {
    let d = decay.min((1.0 + steps as f64) / (10.0 + steps as f64));
    for id in params.ids() {
        let src = params.get(id).data();
        for (e, p) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
            *e = d * *e + (1.0 - d) * p;
        }
    }
}

/// Gradient steps per epoch: one pass worth of samples over all `(episode, t)`
/// pairs, unless the config caps it.
pub fn steps_per_epoch(cfg: &RunConfig, episodes: &[EpisodeRecord]) -> usize {
    let pairs: usize = episodes.iter().map(EpisodeRecord::len).sum();
    let full = pairs.div_ceil(cfg.batch_size).max(1);
    cfg.steps_per_epoch.map_or(full, |cap| cap.min(full).max(1))
}

/// One optimizer step on `batch`; returns the noise-prediction MSE.
pub fn train_step(
    net: &mut Denoiser,
    optimizer: &mut AdamW,
    batch: &Batch,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let noised = noise_batch(&batch.chunk, schedule, rng)?;
    let (loss, grads) = {
        let mut g = Graph::new(net.store());
        let x = g.input(noised.noisy);
        let steps = g.input(crate::autodiff::Tensor::new(
            &[noised.steps.len()],
            noised.steps.iter().map(|&k| k as f64).collect(),
        ));
        let h = g.input(batch.history.clone());
        let obs = net.encode_graph(&mut g, h);
        let pred = net.forward(&mut g, x, steps, obs);
        let target = g.input(noised.eps);
        let l = g.mse(pred, target);
        let value = g.value(l).item();
        (value, g.backward(l))
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    optimizer.step(net.store_mut(), &grads);
    Ok(loss)
}

/// Runs the next epoch. Batches for epoch `e` come from a generator keyed by
/// `(seed, e)`, so a resumed run matches an uninterrupted one.
pub fn train_epoch(
    state: &mut TrainState,
    episodes: &[EpisodeRecord],
    stats: &NormalizationStats,
    cfg: &RunConfig,
    ladder: &FrequencyLadder,
    schedule: &DiffusionSchedule,
) -> Result<EpochLog> {
    let epoch = state.epochs_done + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let steps = steps_per_epoch(cfg, episodes);
    let mut total = 0.0;
    for step in 0..steps {
        let samples = sample_batch(
            episodes,
            stats,
            ladder,
            cfg.history_len,
            cfg.chunk_len,
            cfg.batch_size,
            &mut rng,
        )?;
        let batch = Batch::from_samples(&samples)?;
        total += train_step(&mut state.net, &mut state.optimizer, &batch, schedule, &mut rng).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, step {}", step + 1)),
            other => other,
        })?;
        update_ema(
            &mut state.ema,
            state.net.store(),
            cfg.ema_decay,
            state.optimizer.steps_taken(),
        );
    }
    let log = EpochLog {
        epoch,
        mean_loss: total / steps as f64,
        steps,
    };
    state.epochs_done = epoch;
    state.history.push(log.clone());
    Ok(log)
}

/// Trains `epochs` more epochs, calling `on_epoch` after each.
pub fn train(
    state: &mut TrainState,
    episodes: &[EpisodeRecord],
    stats: &NormalizationStats,
    cfg: &RunConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<()> {
    let ladder = cfg.ladder()?;
    let schedule = cfg.schedule()?;
    for _ in 0..epochs {
        let log = train_epoch(state, episodes, stats, cfg, &ladder, &schedule)?;
        on_epoch(state, &log)?;
    }
    Ok(())
}
