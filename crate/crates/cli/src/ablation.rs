//! The ablation grid.

use multichunk::network::ConditionMode;
use multichunk::RunConfig;

pub const SAMPLE_COUNTS: [usize; 4] = [2, 5, 10, 100];
/// `(L_h, L_c, M)` triples of the window sweep.
pub const WINDOW_SWEEP: [(usize, usize, usize); 5] = [(3, 8, 3), (1, 8, 3), (5, 8, 3), (3, 4, 3), (3, 8, 1)];

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    /// Training config; variants that share it share one trained model.
    pub config: RunConfig,
}

/// `base` restricted to the first `m` strides of its ladder, keeping the
/// matching interior thresholds.
pub fn with_frequencies(base: &RunConfig, m: usize) -> RunConfig {
    let m = m.clamp(1, base.strides.len());
    RunConfig {
        strides: base.strides[..m].to_vec(),
        thresholds: base.thresholds[..m - 1].to_vec(),
        calibration_percentiles: if m == base.strides.len() {
            base.calibration_percentiles.clone()
        } else {
            base.calibration_percentiles.iter().take(m - 1).copied().collect()
        },
        ..base.clone()
    }
}

pub fn grid(base: &RunConfig) -> Vec<Variant> {
    let mut out = vec![Variant {
        name: "full".into(),
        config: base.clone(),
    }];
    for (name, condition) in [
        ("condition-high-only", ConditionMode::HighOnly),
        ("condition-low-only", ConditionMode::LowOnly),
    ] {
        out.push(Variant {
            name: name.into(),
            config: RunConfig {
                condition,
                ..base.clone()
            },
        });
    }
    out.push(Variant {
        name: "no-fusion".into(),
        config: RunConfig {
            fusion: false,
            ..base.clone()
        },
    });
    out.push(Variant {
        name: "single-frequency".into(),
        config: with_frequencies(base, 1),
    });
    for n in SAMPLE_COUNTS {
        out.push(Variant {
            name: format!("samples-{n}"),
            config: RunConfig {
                samples: n,
                ..base.clone()
            },
        });
    }
    for (lh, lc, m) in WINDOW_SWEEP {
        let cfg = with_frequencies(base, m);
        out.push(Variant {
            name: format!("lh{lh}-lc{lc}-m{m}"),
            config: RunConfig {
                history_len: lh,
                chunk_len: lc,
                action_horizon: cfg.action_horizon.min(lc),
                ..cfg
            },
        });
    }
    out
}

/// The config with evaluation-only keys reset, used to decide whether two
/// variants can share a trained model.
pub fn training_key(cfg: &RunConfig) -> RunConfig {
    let base = RunConfig::default();
    RunConfig {
        samples: base.samples,
        eval_episodes: base.eval_episodes,
        eval_seed: base.eval_seed,
        action_horizon: base.action_horizon.min(cfg.chunk_len),
        thresholds: cfg.thresholds.iter().map(|_| 0.0).collect(),
        calibration_percentiles: vec![],
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_the_documented_cells() {
        let base = RunConfig::default();
        let g = grid(&base);
        let names: Vec<_> = g.iter().map(|v| v.name.as_str()).collect();
        for n in [
            "full",
            "condition-high-only",
            "condition-low-only",
            "no-fusion",
            "single-frequency",
            "samples-100",
        ] {
            assert!(names.contains(&n), "{n}");
        }
        for v in &g {
            v.config.validate().unwrap_or_else(|e| panic!("{}: {e}", v.name));
        }
        let single = g.iter().find(|v| v.name == "single-frequency").unwrap();
        assert_eq!(single.config.strides, vec![1]);
        assert!(single.config.thresholds.is_empty());
        let short = g.iter().find(|v| v.name == "lh3-lc4-m3").unwrap();
        assert_eq!((short.config.chunk_len, short.config.action_horizon), (4, 4));
    }

    #[test]
    fn sample_and_reference_cells_share_the_full_model() {
        let base = RunConfig::default();
        let g = grid(&base);
        let key = |n: &str| training_key(&g.iter().find(|v| v.name == n).unwrap().config);
        assert_eq!(key("samples-2"), key("full"));
        assert_eq!(key("lh3-lc8-m3"), key("full"));
        assert_eq!(key("lh3-lc8-m1"), key("single-frequency"));
        assert_ne!(key("no-fusion"), key("full"));
    }
}
