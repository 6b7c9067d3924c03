//! Append-only results log and the tables printed from it.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use multichunk::EvalReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RESULTS_FILE: &str = "results.jsonl";

/// One evaluated cell. Failed cells carry `error` instead of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub timestamp_ms: u64,
    pub invocation: String,
    pub command: String,
    pub task_id: String,
    pub variant: String,
    pub mode: String,
    pub samples: usize,
    pub thresholds: Vec<f64>,
    pub checkpoint: Option<String>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Identifier shared by all records of one process run.
pub fn invocation_id() -> String {
    format!("{}-{}", now_ms(), std::process::id())
}

pub fn append(path: &Path, record: &ResultRecord) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read(path: &Path) -> CliResult<Vec<ResultRecord>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::User(format!("{}:{}: malformed record: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Fixed-width table: task, variant, mode, SR, executed commands, base steps.
pub fn table(records: &[ResultRecord]) -> String {
    let mut s = format!(
        "{:<22} {:<22} {:<14} {:>6} {:>9} {:>10}\n",
        "task", "variant", "mode", "SR", "commands", "base_steps"
    );
    for r in records {
        match (&r.report, &r.error) {
            (Some(rep), _) => {
                s += &format!(
                    "{:<22} {:<22} {:<14} {:>6.3} {:>9.1} {:>10.1}\n",
                    r.task_id, r.variant, r.mode, rep.success_rate, rep.mean_executed_commands, rep.mean_base_steps
                )
            }
            (None, e) => {
                s += &format!(
                    "{:<22} {:<22} {:<14} failed: {}\n",
                    r.task_id,
                    r.variant,
                    r.mode,
                    e.as_deref().unwrap_or("unknown error")
                )
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use multichunk::envbench::EpisodeOutcome;

    fn record(variant: &str, ok: bool) -> ResultRecord {
        let report = EvalReport::from_outcomes(
            "latch_close",
            vec![EpisodeOutcome {
                seed: 1,
                success: true,
                executed_commands: 10,
                base_steps_elapsed: 40,
                aborted: None,
            }],
        )
        .unwrap();
        ResultRecord {
            timestamp_ms: 1,
            invocation: "a".into(),
            command: "eval".into(),
            task_id: "latch_close".into(),
            variant: variant.into(),
            mode: "fixed-high".into(),
            samples: 1,
            thresholds: vec![],
            checkpoint: None,
            report: ok.then_some(report),
            error: (!ok).then(|| "boom".into()),
        }
    }

    #[test]
    fn appends_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join(RESULTS_FILE);
        append(&p, &record("full", true)).unwrap();
        append(&p, &record("m1", false)).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back, vec![record("full", true), record("m1", false)]);
        let t = table(&back);
        assert!(t.lines().next().unwrap().split_whitespace().eq([
            "task",
            "variant",
            "mode",
            "SR",
            "commands",
            "base_steps"
        ]));
        assert!(t.contains("1.000") && t.contains("failed: boom"));
    }
}
