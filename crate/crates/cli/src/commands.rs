use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use multichunk::checkpoint::Checkpoint;
use multichunk::dataset::{generate_demos, load_dataset, save_dataset, task_dir};
use multichunk::envbench::task_spec;
use multichunk::executor::{calibrate_thresholds, evaluate_policy, Gate, Policy, RolloutConfig, RolloutTrace};
use multichunk::train::{train as train_epochs, TrainState};
use multichunk::{EvalReport, FrequencyLadder, RunConfig};
use toml::Value;

use crate::ablation;
use crate::error::{CliError, CliResult};
use crate::plot;
use crate::results::{self, ResultRecord, RESULTS_FILE};
use crate::settings::{self, Settings};
use crate::{Common, Mode};

/// Calibration rollouts start this far past the evaluation seeds so the two
/// never share episodes.
pub const CALIBRATION_SEED_OFFSET: u64 = 500_000;

const ARCHITECTURE_KEYS: [&str; 13] = [
    "width",
    "channel_mults",
    "step_embed_dim",
    "heads",
    "encoder_hidden",
    "kernel",
    "groups",
    "condition",
    "fusion",
    "strides",
    "history_len",
    "chunk_len",
    "base_rate_hz",
];

/// Keys that may differ between training and evaluation.
const RUNTIME_KEYS: [&str; 9] = [
    "samples",
    "eval_episodes",
    "eval_seed",
    "action_horizon",
    "thresholds",
    "calibration_percentiles",
    "clipping",
    "run_dir",
    "data_root",
];

fn settings(common: &Common) -> CliResult<Settings> {
    let mut sets = common.sets.clone();
    let path_value = |p: &Path| Value::String(p.to_string_lossy().into_owned());
    if let Some(p) = &common.data_root {
        sets.push(("data_root".into(), path_value(p)));
    }
    if let Some(p) = &common.run_dir {
        sets.push(("run_dir".into(), path_value(p)));
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::User(format!("seed {seed} is too large")))?;
        sets.push(("seed".into(), Value::Integer(seed)));
    }
    if !common.tasks.is_empty() {
        for t in &common.tasks {
            task_spec(t)?;
        }
        sets.push((
            "tasks".into(),
            Value::Array(common.tasks.iter().cloned().map(Value::String).collect()),
        ));
    }
    settings::load(common.config.as_deref(), &sets)
}

/// The checkpoint's own config with runtime keys the user set explicitly
/// taken from `s`.
fn runtime_config(ck: &Checkpoint, s: &Settings) -> CliResult<RunConfig> {
    let mut table: toml::Table = toml::from_str(&ck.run.to_toml()?)
        .map_err(|e| CliError::Internal(format!("re-reading embedded config: {e}")))?;
    for key in RUNTIME_KEYS {
        if let Some(v) = s.explicit.get(key) {
            table.insert(key.into(), v.clone());
        }
    }
    Ok(RunConfig::from_toml(
        &table.to_string(),
        Path::new("<checkpoint config>"),
    )?)
}

fn check_compatible(ck: &Checkpoint, s: &Settings) -> CliResult<()> {
    if !s.from_file && !ARCHITECTURE_KEYS.iter().any(|k| s.is_set(k)) {
        return Ok(());
    }
    let ours = s.config.denoiser();
    let theirs = ck.state.net.config();
    if &ours != theirs || s.config.strides != ck.ladder.strides() {
        return Err(CliError::User(format!(
            "checkpoint/config mismatch: checkpoint has {theirs:?} with strides {:?}, config asks for {ours:?} with strides {:?}",
            ck.ladder.strides(),
            s.config.strides
        )));
    }
    Ok(())
}

fn check_task(ck: &Checkpoint, common: &Common) -> CliResult<()> {
    if !common.tasks.is_empty() && !common.tasks.contains(&ck.task_id) {
        return Err(CliError::User(format!(
            "checkpoint is for `{}`, not {:?}",
            ck.task_id, common.tasks
        )));
    }
    Ok(())
}

fn gate(mode: Mode, ladder: &FrequencyLadder) -> Gate {
    let m = ladder.len();
    match mode {
        _ if m == 1 => Gate::Fixed(0),
        Mode::EntropyGated => Gate::Entropy,
        Mode::FixedHigh => Gate::Fixed(0),
        Mode::FixedMid => Gate::Fixed((m - 1) / 2),
        Mode::FixedLow => Gate::Fixed(m - 1),
    }
}

fn ladder_for(
    ck: &Checkpoint,
    run: &RunConfig,
    s: &Settings,
    thresholds: Option<Vec<f64>>,
) -> CliResult<FrequencyLadder> {
    match thresholds {
        Some(t) => Ok(ck.ladder.retuned(&t)?),
        None if s.is_set("thresholds") => Ok(ck.ladder.retuned(&run.thresholds)?),
        None => Ok(ck.ladder.clone()),
    }
}

fn policy_for(ck: &Checkpoint, run: &RunConfig) -> CliResult<Policy> {
    Ok(Policy {
        net: ck.state.ema_net(),
        stats: ck.stats.clone(),
        schedule: run.schedule()?,
        clipping: run.clipping,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn gen_demos(common: &Common, force: bool) -> CliResult<()> {
    let cfg = settings(common)?.config;
    for task in &cfg.tasks {
        let dir = task_dir(&cfg.data_root, task);
        if dir.exists() && !force {
            return Err(CliError::User(format!(
                "dataset {} already exists; pass --force to regenerate",
                dir.display()
            )));
        }
        let spec = task_spec(task)?;
        let episodes = generate_demos(&spec, cfg.demos, cfg.seed, cfg.retry_budget)?;
        save_dataset(&cfg.data_root, task, &episodes, force)?;
        println!("{task}: wrote {} episodes to {}", episodes.len(), dir.display());
    }
    Ok(())
}

pub fn checkpoint_dir(run_dir: &Path, task: &str) -> PathBuf {
    run_dir.join(task)
}

pub fn final_checkpoint(run_dir: &Path, task: &str) -> PathBuf {
    checkpoint_dir(run_dir, task).join("final.ckpt")
}

fn epoch_checkpoint(run_dir: &Path, task: &str, epoch: usize) -> PathBuf {
    checkpoint_dir(run_dir, task).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains `ck` up to `ck.run.epochs`, checkpointing every
/// `checkpoint_every` epochs and at the end into `run_dir`.
fn run_training(ck: &mut Checkpoint, episodes: &[multichunk::EpisodeRecord], run_dir: &Path) -> CliResult<PathBuf> {
    let dir = checkpoint_dir(run_dir, &ck.task_id);
    create_dir(&dir)?;
    let remaining = ck.run.epochs.saturating_sub(ck.state.epochs_done);
    let log_path = dir.join("train_log.jsonl");
    let (task_id, run, ladder, stats) = (ck.task_id.clone(), ck.run.clone(), ck.ladder.clone(), ck.stats.clone());
    let mut state = ck.state.clone();
    train_epochs(&mut state, episodes, &stats, &run, remaining, |state, log| {
        eprintln!(
            "{task_id}: epoch {} loss {:.6} ({} steps)",
            log.epoch, log.mean_loss, log.steps
        );
        let line = serde_json::to_string(log)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| multichunk::Error::InvalidArgument(format!("opening {}: {e}", log_path.display())))?;
        std::io::Write::write_all(&mut f, format!("{line}\n").as_bytes())
            .map_err(|e| multichunk::Error::InvalidArgument(format!("writing {}: {e}", log_path.display())))?;
        if log.epoch % run.checkpoint_every == 0 {
            let snapshot = Checkpoint {
                task_id: task_id.clone(),
                run: run.clone(),
                ladder: ladder.clone(),
                stats: stats.clone(),
                state: state.clone(),
            };
            snapshot.save(&epoch_checkpoint(run_dir, &task_id, log.epoch))?;
        }
        Ok(())
    })?;
    ck.state = state;
    let path = final_checkpoint(run_dir, &ck.task_id);
    ck.save(&path)?;
    Ok(path)
}

pub fn train(common: &Common, resume: Option<&Path>) -> CliResult<()> {
    let s = settings(common)?;
    if let Some(path) = resume {
        let mut ck = Checkpoint::load(path)?;
        check_task(&ck, common)?;
        let data_root = if s.is_set("data_root") {
            s.config.data_root.clone()
        } else {
            ck.run.data_root.clone()
        };
        let run_dir = if s.is_set("run_dir") {
            s.config.run_dir.clone()
        } else {
            ck.run.run_dir.clone()
        };
        if s.is_set("epochs") {
            ck.run.epochs = s.config.epochs;
        }
        if ck.state.epochs_done >= ck.run.epochs {
            println!("{}: already trained for {} epochs", ck.task_id, ck.state.epochs_done);
            return Ok(());
        }
        let (episodes, _) = load_dataset(&data_root, &ck.task_id)?;
        let out = run_training(&mut ck, &episodes, &run_dir)?;
        println!(
            "{}: resumed to epoch {}, wrote {}",
            ck.task_id,
            ck.state.epochs_done,
            out.display()
        );
        return Ok(());
    }
    let cfg = s.config;
    for task in &cfg.tasks {
        let (episodes, stats) = load_dataset(&cfg.data_root, task)?;
        let mut ck = Checkpoint {
            task_id: task.clone(),
            run: cfg.clone(),
            ladder: cfg.ladder()?,
            stats,
            state: TrainState::new(&cfg)?,
        };
        let out = run_training(&mut ck, &episodes, &cfg.run_dir)?;
        println!(
            "{task}: trained {} epochs, wrote {}",
            ck.state.epochs_done,
            out.display()
        );
    }
    Ok(())
}

fn trace_path(dir: &Path, task: &str, mode: Mode, seed: u64) -> PathBuf {
    dir.join(format!("{task}_{}_seed{seed}.jsonl", mode.name()))
}

fn write_trace(path: &Path, trace: &RolloutTrace) -> multichunk::Result<()> {
    let f = File::create(path)
        .map_err(|e| multichunk::Error::InvalidArgument(format!("creating {}: {e}", path.display())))?;
    trace.write_jsonl(BufWriter::new(f))
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    mode: Mode,
    episodes: Option<usize>,
    thresholds: Option<Vec<f64>>,
    trace_dir: Option<&Path>,
) -> CliResult<()> {
    let s = settings(common)?;
    let ck = Checkpoint::load(checkpoint)?;
    check_task(&ck, common)?;
    check_compatible(&ck, &s)?;
    let run = runtime_config(&ck, &s)?;
    let ladder = ladder_for(&ck, &run, &s, thresholds)?;
    let policy = policy_for(&ck, &run)?;
    let spec = task_spec(&ck.task_id)?;
    let episodes = episodes.unwrap_or(run.eval_episodes);
    let rollout = run.rollout(gate(mode, &ladder));
    if let Some(dir) = trace_dir {
        create_dir(dir)?;
    }
    let report = evaluate_policy(
        &policy,
        &spec,
        &ladder,
        &rollout,
        episodes,
        run.eval_seed,
        |trace| match trace_dir {
            Some(dir) => write_trace(&trace_path(dir, &spec.task_id, mode, trace.summary.seed), trace),
            None => Ok(()),
        },
    )?;
    let invocation = results::invocation_id();
    let path = run.run_dir.join(RESULTS_FILE);
    results::append(
        &path,
        &ResultRecord {
            timestamp_ms: results::now_ms(),
            invocation: invocation.clone(),
            command: "eval".into(),
            task_id: ck.task_id.clone(),
            variant: checkpoint.display().to_string(),
            mode: mode.name().into(),
            samples: rollout.samples,
            thresholds: ladder.interior_thresholds().to_vec(),
            checkpoint: Some(checkpoint.display().to_string()),
            report: Some(report),
            error: None,
        },
    )?;
    print_invocation(&path, &invocation)
}

fn print_invocation(path: &Path, invocation: &str) -> CliResult<()> {
    let mine: Vec<_> = results::read(path)?
        .into_iter()
        .filter(|r| r.invocation == invocation)
        .collect();
    print!("{}", results::table(&mine));
    Ok(())
}

/// Gated rollouts from `first_seed`; returns every decision's entropy.
fn collect_entropies(
    policy: &Policy,
    task: &str,
    ladder: &FrequencyLadder,
    rollout: &RolloutConfig,
    episodes: usize,
    first_seed: u64,
) -> CliResult<Vec<f64>> {
    let spec = task_spec(task)?;
    let mut entropies = Vec::new();
    let config = RolloutConfig {
        gate: Gate::Entropy,
        ..rollout.clone()
    };
    evaluate_policy(policy, &spec, ladder, &config, episodes, first_seed, |trace| {
        entropies.extend(trace.entropies());
        Ok(())
    })?;
    Ok(entropies)
}

fn calibrated(
    policy: &Policy,
    task: &str,
    ladder: &FrequencyLadder,
    run: &RunConfig,
    percentiles: &[f64],
    episodes: usize,
) -> CliResult<(Vec<f64>, usize)> {
    if percentiles.len() + 1 != ladder.len() {
        return Err(CliError::User(format!(
            "{} percentiles given for a {}-frequency ladder; need {}",
            percentiles.len(),
            ladder.len(),
            ladder.len() - 1
        )));
    }
    let rollout = run.rollout(Gate::Entropy);
    let entropies = collect_entropies(
        policy,
        task,
        ladder,
        &rollout,
        episodes,
        run.eval_seed + CALIBRATION_SEED_OFFSET,
    )?;
    Ok((calibrate_thresholds(&entropies, percentiles)?, entropies.len()))
}

#[derive(serde::Serialize)]
struct ThresholdFile {
    thresholds: Vec<f64>,
}

pub fn calibrate(
    common: &Common,
    checkpoint: &Path,
    percentiles: Option<Vec<f64>>,
    episodes: Option<usize>,
    out: Option<&Path>,
) -> CliResult<()> {
    let s = settings(common)?;
    let ck = Checkpoint::load(checkpoint)?;
    check_task(&ck, common)?;
    check_compatible(&ck, &s)?;
    let run = runtime_config(&ck, &s)?;
    let ladder = ladder_for(&ck, &run, &s, None)?;
    let policy = policy_for(&ck, &run)?;
    let percentiles = percentiles.unwrap_or_else(|| run.calibration_percentiles.clone());
    let episodes = episodes.unwrap_or(run.eval_episodes);
    let (thresholds, n) = calibrated(&policy, &ck.task_id, &ladder, &run, &percentiles, episodes)?;
    let out = out.map_or_else(
        || checkpoint_dir(&run.run_dir, &ck.task_id).join("thresholds.toml"),
        Path::to_path_buf,
    );
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    let text = toml::to_string(&ThresholdFile {
        thresholds: thresholds.clone(),
    })
    .map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&out, &text)?;
    let shown: Vec<String> = thresholds.iter().map(|t| format!("{t:.4}")).collect();
    println!(
        "{}: thresholds -inf {} +inf from {n} decisions at percentiles {percentiles:?}; wrote {}",
        ck.task_id,
        shown.join(" "),
        out.display()
    );
    Ok(())
}

pub fn plot_entropy(trace: &Path, out: Option<&Path>) -> CliResult<()> {
    let f = File::open(trace).map_err(|e| CliError::io(format!("opening {}", trace.display()), e))?;
    let t = RolloutTrace::read_jsonl(BufReader::new(f), trace)?;
    let rows = plot::rows(&t.decisions)?;
    let stem = out.map_or_else(|| trace.with_extension(""), Path::to_path_buf);
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&csv_path, &plot::csv(&rows))?;
    let title = format!("{} seed {}: entropy per decision", t.summary.task_id, t.summary.seed);
    write_file(&svg_path, &plot::svg(&rows, &title))?;
    println!("wrote {} and {}", svg_path.display(), csv_path.display());
    Ok(())
}

fn train_variant(
    cfg: &RunConfig,
    task: &str,
    episodes: &[multichunk::EpisodeRecord],
    stats: &multichunk::NormalizationStats,
) -> CliResult<Checkpoint> {
    let mut state = TrainState::new(cfg)?;
    train_epochs(&mut state, episodes, stats, cfg, cfg.epochs, |_, log| {
        eprintln!("{task}: epoch {} loss {:.6}", log.epoch, log.mean_loss);
        Ok(())
    })?;
    Ok(Checkpoint {
        task_id: task.into(),
        run: cfg.clone(),
        ladder: cfg.ladder()?,
        stats: stats.clone(),
        state,
    })
}

fn ablation_cell(
    ck: &Checkpoint,
    variant: &ablation::Variant,
    mode: Mode,
    episodes: usize,
    calibrate: bool,
) -> CliResult<(EvalReport, Vec<f64>, usize)> {
    let run = &variant.config;
    let mut ladder = run.ladder()?;
    let policy = policy_for(ck, run)?;
    if calibrate && ladder.len() > 1 && mode == Mode::EntropyGated {
        let (t, _) = calibrated(
            &policy,
            &ck.task_id,
            &ladder,
            run,
            &run.calibration_percentiles,
            episodes,
        )?;
        ladder = ladder.retuned(&t)?;
    }
    let rollout = run.rollout(gate(mode, &ladder));
    let spec = task_spec(&ck.task_id)?;
    let report = evaluate_policy(&policy, &spec, &ladder, &rollout, episodes, run.eval_seed, |_| Ok(()))?;
    Ok((report, ladder.interior_thresholds().to_vec(), rollout.samples))
}

pub fn ablate(common: &Common, mode: Mode, episodes: Option<usize>, calibrate: bool, only: &[String]) -> CliResult<()> {
    let cfg = settings(common)?.config;
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    let invocation = results::invocation_id();
    let path = cfg.run_dir.join(RESULTS_FILE);
    let (mut ok, mut failed) = (0, 0);
    for task in &cfg.tasks {
        let (data, stats) = load_dataset(&cfg.data_root, task)?;
        let dir = checkpoint_dir(&cfg.run_dir, task).join("ablate");
        create_dir(&dir)?;
        let mut trained: Vec<(RunConfig, Result<Checkpoint, String>)> = Vec::new();
        for variant in ablation::grid(&cfg) {
            if !only.is_empty() && !only.iter().any(|o| variant.name.contains(o.as_str())) {
                continue;
            }
            let key = ablation::training_key(&variant.config);
            let idx = match trained.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    eprintln!("{task}: training `{}`", variant.name);
                    let ck = train_variant(&variant.config, task, &data, &stats).and_then(|ck| {
                        ck.save(&dir.join(format!("{}.ckpt", variant.name)))?;
                        Ok(ck)
                    });
                    trained.push((key, ck.map_err(|e| e.to_string())));
                    trained.len() - 1
                }
            };
            let outcome = match &trained[idx].1 {
                Ok(ck) => ablation_cell(ck, &variant, mode, episodes, calibrate).map_err(|e| e.to_string()),
                Err(e) => Err(format!("training failed: {e}")),
            };
            let (report, thresholds, samples, error) = match outcome {
                Ok((r, t, n)) => {
                    ok += 1;
                    (Some(r), t, n, None)
                }
                Err(e) => {
                    failed += 1;
                    eprintln!("{task}: `{}` failed: {e}", variant.name);
                    (None, variant.config.thresholds.clone(), variant.config.samples, Some(e))
                }
            };
            results::append(
                &path,
                &ResultRecord {
                    timestamp_ms: results::now_ms(),
                    invocation: invocation.clone(),
                    command: "ablate".into(),
                    task_id: task.clone(),
                    variant: variant.name.clone(),
                    mode: mode.name().into(),
                    samples,
                    thresholds,
                    checkpoint: None,
                    report,
                    error,
                },
            )?;
        }
    }
    if ok + failed == 0 {
        return Err(CliError::User("no ablation variant matched".into()));
    }
    print_invocation(&path, &invocation)?;
    if ok == 0 {
        return Err(CliError::Internal(format!("all {failed} ablation cells failed")));
    }
    Ok(())
}

pub fn table(common: &Common, results_path: Option<&Path>) -> CliResult<()> {
    let path = match results_path {
        Some(p) => p.to_path_buf(),
        None => settings(common)?.config.run_dir.join(RESULTS_FILE),
    };
    print!("{}", results::table(&results::read(&path)?));
    Ok(())
}
