//! Run configuration: a flat JSON object with defaults for every field except
//! the dataset path.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use admt_core::admt::{Ensembling, LossWeights, Mode, PeriodLimit, TrainConfig};
use admt_core::data::BatchSpec;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{CliError, CliResult};

/// Maximum RPA period: a number of iterations or `"half_epoch"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TMax(pub PeriodLimit);

impl Serialize for TMax {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            PeriodLimit::Iters(n) => s.serialize_u64(n as u64),
            PeriodLimit::HalfEpoch => s.serialize_str("half_epoch"),
        }
    }
}

impl<'de> Deserialize<'de> for TMax {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = TMax;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive iteration count or \"half_epoch\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<TMax, E> {
                if v == 0 {
                    return Err(E::custom("t_max must be at least 1"));
                }
                Ok(TMax(PeriodLimit::Iters(v as usize)))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<TMax, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom("t_max must be positive"))
                    .and_then(|v| self.visit_u64(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<TMax, E> {
                match v {
                    "half_epoch" => Ok(TMax(PeriodLimit::HalfEpoch)),
                    other => Err(E::custom(format!("unknown t_max {other:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

impl fmt::Display for TMax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            PeriodLimit::Iters(n) => write!(f, "{n}"),
            PeriodLimit::HalfEpoch => f.write_str("half_epoch"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Path to a dataset manifest; relative paths resolve against the config
    /// file's directory.
    pub dataset: Option<PathBuf>,
    pub labeled_fraction: f64,
    pub batch: usize,
    pub mu: f64,
    pub max_iters: usize,
    /// Side of the square training crop.
    pub crop: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub lambda_u_max: f64,
    /// Defaults to 10% of `max_iters`.
    pub ramp_iters: Option<usize>,
    pub tau: f64,
    pub t_max: TMax,
    pub mode: Mode,
    /// Defaults per mode: `avg` for `admt_rpa_only`, `ccm` for `admt_full`.
    pub ensembling: Option<Ensembling>,
    /// Seeds for the ablation grid; defaults to `seed, seed + 1, seed + 2`.
    pub ablate_seeds: Option<Vec<u64>>,
    /// Extra `admt_full` cells, one per listed ensembling rule.
    pub ablate_ensembling: Vec<Ensembling>,
    /// Extra `admt_full` cells, one per threshold.
    pub ablate_tau: Vec<f64>,
    /// Extra `admt_full` cells, one per period limit.
    pub ablate_t_max: Vec<TMax>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            labeled_fraction: 0.05,
            batch: 4,
            mu: 1.0,
            max_iters: 1000,
            crop: 32,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_decay: 0.99,
            ema_warmup: false,
            lambda_u_max: 2.0,
            ramp_iters: None,
            tau: 0.95,
            t_max: TMax(PeriodLimit::HalfEpoch),
            mode: Mode::AdmtFull,
            ensembling: None,
            ablate_seeds: None,
            ablate_ensembling: Vec::new(),
            ablate_tau: Vec::new(),
            ablate_t_max: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses, resolves defaults and validates. The dataset path is made
    /// absolute relative to `base_dir`.
    /// `seed` overrides the file's seed before defaults that depend on it
    /// are derived.
    pub fn from_json(text: &str, base_dir: &Path, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base_dir.join(d));
            }
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, seed)
    }

    /// Fills derived defaults in place and validates the result.
    pub fn resolve(&mut self) -> CliResult<()> {
        self.ensembling = self.mode.resolve_ensembling(self.ensembling).map_err(usage)?;
        if self.ramp_iters.is_none() {
            self.ramp_iters = Some(self.max_iters / 10);
        }
        if self.ablate_seeds.is_none() {
            self.ablate_seeds = Some((0..3).map(|k| self.seed.wrapping_add(k)).collect());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return Err(CliError::Usage(format!(
                "labeled_fraction must lie in (0, 1), got {}",
                self.labeled_fraction
            )));
        }
        if self.ablate_seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(CliError::Usage("ablate_seeds must not be empty".into()));
        }
        if let Some(t) = self.ablate_tau.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(CliError::Usage(format!("ablate_tau entry {t} outside (0, 1)")));
        }
        self.train_config().validate().map_err(usage)?;
        Ok(())
    }

    /// The core training configuration. Call after [`RunConfig::resolve`].
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mode: self.mode,
            ensembling: self.ensembling,
            batch: BatchSpec {
                batch: self.batch,
                mu: self.mu,
            },
            crop: self.crop,
            max_iters: self.max_iters,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            ema_warmup: self.ema_warmup,
            weights: LossWeights {
                lambda_u_max: self.lambda_u_max,
                ramp_iters: self.ramp_iters.unwrap_or(self.max_iters / 10),
                tau: self.tau,
            },
            t_max: self.t_max.0,
        }
    }

    pub fn dataset_path(&self) -> CliResult<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("config does not name a dataset".into()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn usage(e: admt_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<RunConfig> {
        RunConfig::from_json(text, Path::new("/data"), None)
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = parse(r#"{"dataset": "set/manifest.json"}"#).unwrap();
        assert_eq!(cfg.base_lr, 0.01);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.ema_decay, 0.99);
        assert_eq!(cfg.lambda_u_max, 2.0);
        assert_eq!(cfg.t_max, TMax(PeriodLimit::HalfEpoch));
        assert_eq!(cfg.ensembling, Some(Ensembling::Ccm));
        assert_eq!(cfg.ramp_iters, Some(100));
        assert_eq!(cfg.ablate_seeds, Some(vec![0, 1, 2]));
        assert_eq!(cfg.dataset.as_deref(), Some(Path::new("/data/set/manifest.json")));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse(r#"{"mode": "admt_rpa_only", "t_max": 7, "seed": 3}"#).unwrap();
        assert_eq!(cfg.ensembling, Some(Ensembling::Avg));
        let again = parse(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert!(cfg.to_json().contains("\"t_max\": 7"));
    }

    #[test]
    fn seed_override_feeds_ablation_seeds() {
        let cfg = RunConfig::from_json(r#"{"seed": 1}"#, Path::new("."), Some(10)).unwrap();
        assert_eq!(cfg.seed, 10);
        assert_eq!(cfg.ablate_seeds, Some(vec![10, 11, 12]));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            r#"{"unknown_field": 1}"#,
            r#"{"mode": "sup_only", "ensembling": "ccm"}"#,
            r#"{"mode": "admt_rpa_only", "ensembling": "entropy"}"#,
            r#"{"t_max": 0}"#,
            r#"{"t_max": "epoch"}"#,
            r#"{"tau": 1.5}"#,
            r#"{"labeled_fraction": 0}"#,
            r#"{"batch": 3, "mu": 0.5}"#,
            r#"{"mode": "teacher_only"}"#,
            r#"{"ablate_seeds": []}"#,
        ] {
            assert!(matches!(parse(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }
}
