//! Config file plus command-line overrides.

use std::path::{Path, PathBuf};

use multichunk::RunConfig;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// The effective configuration and the keys the user set explicitly, either
/// in the file or on the command line.
pub struct Settings {
    pub config: RunConfig,
    pub explicit: Table,
    pub from_file: bool,
}

impl Settings {
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains_key(key)
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Loads `path` (if any), then applies `key=value` overrides in order.
pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Settings> {
    let (mut table, source) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
            let t: Table =
                toml::from_str(&text).map_err(|e| CliError::User(format!("malformed config {}: {e}", p.display())))?;
            (t, p.to_path_buf())
        }
        None => (Table::new(), PathBuf::from("<command line>")),
    };
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    let config = RunConfig::from_toml(&table.to_string(), &source)?;
    Ok(Settings {
        config,
        explicit: table,
        from_file: path.is_some(),
    })
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.to_string(), parse_value(v.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed() {
        let sets: Vec<_> = [
            "epochs=3",
            "thresholds=[-2.0, -1.0]",
            "data_root=/tmp/x",
            "clipping=final",
        ]
        .iter()
        .map(|s| parse_override(s).unwrap())
        .collect();
        let s = load(None, &sets).unwrap();
        assert_eq!(s.config.epochs, 3);
        assert_eq!(s.config.thresholds, vec![-2.0, -1.0]);
        assert_eq!(s.config.data_root, PathBuf::from("/tmp/x"));
        assert!(s.is_set("thresholds") && !s.is_set("seed"));
    }

    #[test]
    fn unknown_keys_are_user_errors() {
        let sets = vec![parse_override("epoch=3").unwrap()];
        assert!(matches!(load(None, &sets), Err(CliError::User(_))));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "epochs = 5\nseed = 9\n").unwrap();
        let s = load(Some(&p), &[parse_override("epochs=7").unwrap()]).unwrap();
        assert_eq!((s.config.epochs, s.config.seed), (7, 9));
        assert!(s.from_file);
    }
}
