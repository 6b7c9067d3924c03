//! Multi-frequency action chunking with diffusion chunk generation and
//! entropy-gated execution, plus toy 2-D manipulation benchmarks.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod envbench;
pub mod error;
pub mod executor;
pub mod io;
pub mod network;
pub mod temporal;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{EpisodeRecord, NormalizationStats};
pub use envbench::{EvalReport, TaskSpec};
pub use error::{Error, Result};
pub use executor::{EntropyEstimate, ExecutionDecision, Gate, Policy, RolloutConfig, RolloutTrace};
pub use network::{Denoiser, DenoiserConfig};
pub use temporal::{Action, FrequencyLadder, HierarchicalChunk, HierarchicalHistory, Observation};
