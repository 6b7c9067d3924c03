//! Shared fixtures for the benchmarks: a small policy with an untrained
//! network and a real history window from a scripted episode.

use multichunk::dataset::{fit_normalizer, generate_demos, EpisodeRecord};
use multichunk::diffusion::Clipping;
use multichunk::envbench::task_spec;
use multichunk::executor::Policy;
use multichunk::temporal::resample_history_frames;
use multichunk::{Denoiser, FrequencyLadder, HierarchicalHistory, RunConfig};

/// Width-32 network with 16 diffusion steps.
pub fn bench_config() -> RunConfig {
    RunConfig {
        width: 32,
        encoder_hidden: 32,
        step_embed_dim: 32,
        diffusion_steps: 16,
        batch_size: 64,
        ..Default::default()
    }
}

pub struct Fixture {
    pub config: RunConfig,
    pub policy: Policy,
    pub ladder: FrequencyLadder,
    pub history: HierarchicalHistory,
    pub episodes: Vec<EpisodeRecord>,
}

pub fn fixture(config: RunConfig) -> Fixture {
    let spec = task_spec("two_stage_pick_place").expect("registered task");
    let episodes = generate_demos(&spec, 4, 0, 20).expect("demos");
    let stats = fit_normalizer(&episodes).expect("stats");
    let ladder = config.ladder().expect("ladder");
    let history = resample_history_frames(&episodes[0].observations, 20, &ladder, config.history_len).expect("history");
    let policy = Policy {
        net: Denoiser::new(config.denoiser(), 0).expect("network"),
        stats,
        schedule: config.schedule().expect("schedule"),
        clipping: Clipping::Denoised,
    };
    Fixture {
        config,
        policy,
        ladder,
        history,
        episodes,
    }
}
