use std::path::PathBuf;
use std::process::{Command, Output};

const TINY: &str = r#"
tasks = ["latch_close"]
demos = 3
batch_size = 8
epochs = 2
steps_per_epoch = 2
checkpoint_every = 1
diffusion_steps = 5
width = 8
channel_mults = [1, 2]
step_embed_dim = 8
heads = 2
encoder_hidden = 8
groups = 2
samples = 4
eval_episodes = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.config(), TINY).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_multichunk"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .arg("--run-dir")
            .arg(self.path("runs"))
            .env("MULTICHUNK_DATA_ROOT", self.path("data"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn checkpoint(&self) -> String {
        self.path("runs/latch_close/final.ckpt").display().to_string()
    }

    fn trained() -> Self {
        let ws = Self::new();
        ws.ok(&["gen-demos"]);
        ws.ok(&["train"]);
        ws
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_demos_refuses_to_overwrite_without_force() {
    let ws = Workspace::new();
    ws.ok(&["gen-demos"]);
    assert!(ws.path("data/latch_close/stats.json").exists());
    let again = ws.run(&["gen-demos"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    ws.ok(&["gen-demos", "--force"]);
}

#[test]
fn unknown_task_lists_registered_ones() {
    let ws = Workspace::new();
    let out = ws.run(&["gen-demos", "--task", "nope"]);
    assert_eq!(code(&out), 1);
    for t in ["approach_insert", "latch_close", "two_stage_pick_place"] {
        assert!(stderr(&out).contains(t), "{}", stderr(&out));
    }
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["frobnicate"])), 1);
    assert_eq!(code(&ws.run(&["eval"])), 1);
    assert_eq!(code(&ws.run(&["--help"])), 0);
    assert_eq!(code(&ws.run(&["train", "--set", "epoch=3"])), 1);
}

#[test]
fn training_without_data_is_a_user_error() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["train"])), 1);
}

#[test]
fn diverging_training_is_an_internal_error() {
    let ws = Workspace::new();
    ws.ok(&["gen-demos"]);
    let out = ws.run(&["train", "--set", "learning_rate=1e300", "--set", "epochs=5"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"));
}

fn logged_epochs(ws: &Workspace) -> Vec<u64> {
    std::fs::read_to_string(ws.path("runs/latch_close/train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"]
                .as_u64()
                .unwrap()
        })
        .collect()
}

#[test]
fn train_writes_checkpoints_and_resume_continues_numbering() {
    let ws = Workspace::trained();
    for f in ["epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"] {
        assert!(ws.path(&format!("runs/latch_close/{f}")).exists(), "{f}");
    }
    assert_eq!(logged_epochs(&ws), vec![1, 2]);
    let ck = ws.checkpoint();
    ws.ok(&["train", "--resume", &ck, "--set", "epochs=3"]);
    assert_eq!(logged_epochs(&ws), vec![1, 2, 3]);
    assert!(ws.path("runs/latch_close/epoch_0003.ckpt").exists());
}

#[test]
fn eval_appends_timestamped_records_and_prints_the_table() {
    let ws = Workspace::trained();
    let ck = ws.checkpoint();
    let out = ws.ok(&["eval", "--checkpoint", &ck, "--mode", "fixed-high"]);
    let header: Vec<&str> = out.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["task", "variant", "mode", "SR", "commands", "base_steps"]);
    assert!(out.contains("latch_close") && out.contains("fixed-high"));
    ws.ok(&["eval", "--checkpoint", &ck, "--mode", "fixed-low"]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(ws.path("runs/results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|r| r["timestamp_ms"].as_u64().unwrap() > 0));
    assert_eq!(lines[1]["mode"], "fixed-low");
    let table = ws.ok(&["table"]);
    assert_eq!(table.lines().count(), 3);
}

fn outcomes(ws: &Workspace) -> Vec<serde_json::Value> {
    std::fs::read_to_string(ws.path("runs/results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["report"]["outcomes"].clone())
        .collect()
}

#[test]
fn fixed_high_matches_thresholds_that_force_the_first_interval() {
    let ws = Workspace::trained();
    let ck = ws.checkpoint();
    ws.ok(&["eval", "--checkpoint", &ck, "--mode", "fixed-high"]);
    ws.ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--mode",
        "entropy-gated",
        "--thresholds",
        "1e300,1e301",
    ]);
    let o = outcomes(&ws);
    assert_eq!(o[0], o[1]);
}

#[test]
fn mismatched_config_is_rejected() {
    let ws = Workspace::trained();
    let ck = ws.checkpoint();
    let out = ws.run(&["eval", "--checkpoint", &ck, "--set", "width=16"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("mismatch"));
}

#[test]
fn calibration_needs_enough_decisions() {
    let ws = Workspace::trained();
    let ck = ws.checkpoint();
    let out = ws.run(&["calibrate", "--checkpoint", &ck, "--episodes", "1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("100"), "{}", stderr(&out));

    let dest = ws.path("th.toml");
    ws.ok(&[
        "calibrate",
        "--checkpoint",
        &ck,
        "--episodes",
        "30",
        "--out",
        dest.to_str().unwrap(),
    ]);
    let t: toml::Table = toml::from_str(&std::fs::read_to_string(&dest).unwrap()).unwrap();
    let v: Vec<f64> = t["thresholds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_float().unwrap())
        .collect();
    assert_eq!(v.len(), 2);
    assert!(v[0] < v[1]);
}

#[test]
fn plot_entropy_writes_csv_and_svg() {
    let ws = Workspace::trained();
    let ck = ws.checkpoint();
    let traces = ws.path("traces");
    ws.ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--episodes",
        "1",
        "--trace-dir",
        traces.to_str().unwrap(),
    ]);
    let trace = std::fs::read_dir(&traces).unwrap().next().unwrap().unwrap().path();
    let out = ws.path("plots/curve");
    ws.ok(&[
        "plot-entropy",
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "decision_index,base_step,entropy,frequency_index"
    );
    assert!(csv.lines().count() > 1);
    assert!(std::fs::read_to_string(out.with_extension("svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn plot_entropy_rejects_empty_traces_without_writing() {
    let ws = Workspace::new();
    let trace = ws.path("empty.jsonl");
    std::fs::write(
        &trace,
        r#"{"kind":"summary","task_id":"latch_close","seed":1,"success":false,"executed_commands":0,"base_steps_elapsed":0,"aborted":null}"#,
    )
    .unwrap();
    let out = ws.run(&["plot-entropy", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(!ws.path("empty.csv").exists() && !ws.path("empty.svg").exists());
    std::fs::write(&trace, "not json\n").unwrap();
    assert_eq!(code(&ws.run(&["plot-entropy", "--trace", trace.to_str().unwrap()])), 1);
}

#[test]
fn ablation_cells_share_models_and_report_failures() {
    let ws = Workspace::trained();
    let out = ws.ok(&[
        "ablate",
        "--only",
        "samples-2",
        "--only",
        "single-frequency",
        "--episodes",
        "1",
    ]);
    assert!(out.contains("samples-2") && out.contains("single-frequency"), "{out}");
    let dir = ws.path("runs/latch_close/ablate");
    assert_eq!(std::fs::read_dir(dir).unwrap().count(), 2);
    let none = ws.run(&["ablate", "--only", "nothing-matches"]);
    assert_eq!(code(&none), 1);
}

/// gen-demos, one epoch of training, five evaluation episodes; returns the
/// checkpoint bytes and the report.
fn pipeline(ws: &Workspace) -> (Vec<u8>, serde_json::Value) {
    ws.ok(&["gen-demos", "--set", "demos=2"]);
    ws.ok(&["train", "--set", "epochs=1"]);
    ws.ok(&["eval", "--checkpoint", &ws.checkpoint(), "--episodes", "5"]);
    let record: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(ws.path("runs/results.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    (std::fs::read(ws.checkpoint()).unwrap(), record["report"].clone())
}

#[test]
fn pipeline_replays_bit_identically() {
    let ws = Workspace::new();
    let a = pipeline(&ws);
    for d in ["runs", "data"] {
        std::fs::remove_dir_all(ws.path(d)).unwrap();
    }
    let b = pipeline(&ws);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.1["episodes"], 5);
}
