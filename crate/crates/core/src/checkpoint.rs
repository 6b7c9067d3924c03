//! Checkpoints: weights, optimizer moments, run config, normalization stats
//! and ladder in one versioned container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Tensor};
use crate::config::RunConfig;
use crate::dataset::NormalizationStats;
use crate::error::{Error, Result};
use crate::executor::Policy;
use crate::io::{read_container, write_container};
use crate::network::{Denoiser, DenoiserConfig};
use crate::temporal::FrequencyLadder;
use crate::train::{EpochLog, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    task_id: String,
    run: RunConfig,
    denoiser: DenoiserConfig,
    ladder: FrequencyLadder,
    stats: NormalizationStats,
    epochs_done: usize,
    history: Vec<EpochLog>,
    optimizer: AdamWConfig,
    optimizer_steps: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Everything needed to resume training or run a policy.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub task_id: String,
    pub run: RunConfig,
    pub ladder: FrequencyLadder,
    pub stats: NormalizationStats,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let store = self.state.net.store();
        let (first, second) = self.state.optimizer.moments();
        let header = Header {
            task_id: self.task_id.clone(),
            run: self.run.clone(),
            denoiser: self.state.net.config().clone(),
            ladder: self.ladder.clone(),
            stats: self.stats.clone(),
            epochs_done: self.state.epochs_done,
            history: self.state.history.clone(),
            optimizer: self.state.optimizer.config,
            optimizer_steps: self.state.optimizer.steps_taken(),
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let mut payload = Vec::with_capacity(4 * store.num_scalars());
        for (_, t) in store.iter().chain(self.state.ema.iter()) {
            payload.extend_from_slice(t.data());
        }
        for t in first.iter().chain(second) {
            payload.extend_from_slice(t.data());
        }
        write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (Header, Vec<f64>) = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        h.run.validate()?;
        if h.ladder.len() != h.denoiser.num_frequencies {
            return Err(Error::format(path, "ladder does not match the network"));
        }
        let sizes: Vec<usize> = h.tensors.iter().map(|(_, s)| s.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        if payload.len() != 4 * total {
            return Err(Error::format(path, "payload length does not match tensor table"));
        }
        let mut at = 0;
        let mut take = |shape: &[usize], n: usize| {
            let t = Tensor::new(shape, payload[at..at + n].to_vec());
            at += n;
            t
        };
        let params: Vec<(String, Tensor)> = h
            .tensors
            .iter()
            .zip(&sizes)
            .map(|((name, s), &n)| (name.clone(), take(s, n)))
            .collect();
        let ema: Vec<(String, Tensor)> = h
            .tensors
            .iter()
            .zip(&sizes)
            .map(|((name, s), &n)| (name.clone(), take(s, n)))
            .collect();
        let first: Vec<Tensor> = h.tensors.iter().zip(&sizes).map(|((_, s), &n)| take(s, n)).collect();
        let second: Vec<Tensor> = h.tensors.iter().zip(&sizes).map(|((_, s), &n)| take(s, n)).collect();

        let mut net = Denoiser::new(h.denoiser, 0)?;
        let order: Vec<String> = net.store().iter().map(|(n, _)| n.to_string()).collect();
        if order.iter().ne(h.tensors.iter().map(|(n, _)| n)) {
            return Err(Error::format(path, "parameter table does not match the network layout"));
        }
        let mut averaged = net.clone();
        net.load_parameters(params)?;
        averaged.load_parameters(ema)?;
        Ok(Self {
            task_id: h.task_id,
            run: h.run,
            ladder: h.ladder,
            stats: h.stats,
            state: TrainState {
                net,
                optimizer: AdamW::from_state(h.optimizer, h.optimizer_steps, first, second),
                ema: averaged.store().clone(),
                epochs_done: h.epochs_done,
                history: h.history,
            },
        })
    }

    pub fn policy(&self) -> Result<Policy> {
        Ok(Policy {
            net: self.state.ema_net(),
            stats: self.stats.clone(),
            schedule: self.run.schedule()?,
            clipping: self.run.clipping,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{fit_normalizer, generate_demos};
    use crate::envbench::task_spec;
    use crate::train::train;

    #[test]
    fn round_trip_is_exact_and_resumable() {
        let cfg = RunConfig {
            batch_size: 4,
            steps_per_epoch: Some(2),
            diffusion_steps: 5,
            width: 8,
            channel_mults: vec![1, 2],
            step_embed_dim: 8,
            heads: 2,
            encoder_hidden: 8,
            groups: 2,
            ..Default::default()
        };
        let eps = generate_demos(&task_spec("latch_close").unwrap(), 2, 1, 5).unwrap();
        let stats = fit_normalizer(&eps).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        train(&mut state, &eps, &stats, &cfg, 1, |_, _| Ok(())).unwrap();
        let ck = Checkpoint {
            task_id: "latch_close".into(),
            run: cfg.clone(),
            ladder: cfg.ladder().unwrap(),
            stats: stats.clone(),
            state,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let bits = |s: &crate::autodiff::ParamStore| {
            s.iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(back.state.net.store()), bits(ck.state.net.store()));
        assert_eq!(bits(&back.state.ema), bits(&ck.state.ema));
        assert_eq!(back.state.optimizer, ck.state.optimizer);
        assert_eq!(back.state.history, ck.state.history);
        assert_eq!(
            (back.stats, back.ladder, back.run),
            (ck.stats.clone(), ck.ladder.clone(), ck.run.clone())
        );

        let mut a = ck.state.clone();
        let mut b = back.state;
        train(&mut a, &eps, &stats, &cfg, 1, |_, _| Ok(())).unwrap();
        train(&mut b, &eps, &stats, &cfg, 1, |_, _| Ok(())).unwrap();
        assert_eq!(bits(a.net.store()), bits(b.net.store()));
        assert_eq!(b.epochs_done, 2);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        std::fs::write(&path, b"MCCK\x01\x00\x00\x00garbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
