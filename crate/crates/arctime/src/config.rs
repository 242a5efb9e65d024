//! Run configuration: one TOML file with a section per concern, every field
//! optional and falling back to the built-in defaults. A short content hash
//! of the effective configuration is stamped into run manifests so outputs
//! can be traced back to their settings.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budge::BudgeConfig;
use crate::dataset::LoadOptions;
use crate::mcmc::SamplerConfig;
use crate::model::Hyperparams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {msg}")]
    Parse { file: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Dataset-level settings: the fixed GPS location error covariance the
/// model assumes, and the loader's gap screening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Location error covariance (xx, xy, yy), square meters.
    pub location_cov: (f64, f64, f64),
    /// Reading gaps longer than this many seconds are screened.
    pub max_gap_s: f64,
    /// A screened gap is fatal below this straight-line speed, m/s.
    pub min_gap_speed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { location_cov: (100.0, 0.0, 100.0), max_gap_s: 300.0, min_gap_speed: 1.0 }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { max_gap_s: self.max_gap_s, min_gap_speed: self.min_gap_speed }
    }
}

/// Evaluation settings: Monte Carlo effort, interval level, and the seeded
/// train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub interval_sims: usize,
    pub coverage_sims: usize,
    pub level: f64,
    pub bias_correct: bool,
    pub folds_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval_sims: crate::eval::DEFAULT_INTERVAL_SIMS,
            coverage_sims: 2000,
            level: crate::eval::DEFAULT_LEVEL,
            bias_correct: true,
            folds_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hyperparams: Hyperparams,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub budge: BudgeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hyperparams.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.budge.n_bins == 0 {
            return Err(ConfigError::Invalid("budge.n_bins must be at least 1".into()));
        }
        if self.budge.min_per_bin == 0 {
            return Err(ConfigError::Invalid("budge.min_per_bin must be at least 1".into()));
        }
        if self.eval.interval_sims == 0 || self.eval.coverage_sims == 0 {
            return Err(ConfigError::Invalid("eval simulation counts must be positive".into()));
        }
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            return Err(ConfigError::Invalid("eval.level must be inside (0, 1)".into()));
        }
        let (xx, xy, yy) = self.data.location_cov;
        if !(xx > 0.0 && yy > 0.0 && xx * yy - xy * xy > 0.0) {
            return Err(ConfigError::Invalid(
                "data.location_cov must be positive definite".into(),
            ));
        }
        if !(self.data.max_gap_s > 0.0) || !(self.data.min_gap_speed >= 0.0) {
            return Err(ConfigError::Invalid("data gap screening values are out of range".into()));
        }
        Ok(())
    }

    /// The effective configuration rendered as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short stable fingerprint of the effective configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_toml().as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Loads and validates a configuration file, or the defaults when no file
/// is given.
pub fn load_config(path: Option<&FsPath>) -> Result<RunConfig, ConfigError> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                file: p.display().to_string(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse {
                file: p.display().to_string(),
                msg: e.to_string(),
            })?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.sampler.iterations, 50_000);
        assert_eq!(cfg.eval.interval_sims, 5000);
        assert_eq!(cfg.data.location_cov, (100.0, 0.0, 100.0));
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "[sampler]\niterations = 400\nburn_in = 100\n\n[eval]\nlevel = 0.9\n"
        )
        .unwrap();
        let cfg = load_config(Some(f.path())).unwrap();
        assert_eq!(cfg.sampler.iterations, 400);
        assert_eq!(cfg.sampler.burn_in, 100);
        assert_eq!(cfg.sampler.thin, SamplerConfig::default().thin);
        assert_eq!(cfg.eval.level, 0.9);
        assert_eq!(cfg.hyperparams, Hyperparams::default());
        assert!(load_config(None).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[sampler]\niterationz = 400\n").unwrap();
        assert!(matches!(load_config(Some(f.path())), Err(ConfigError::Parse { .. })));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[samplers]\niterations = 400\n").unwrap();
        assert!(matches!(load_config(Some(f.path())), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[sampler]\niterations = 100\nburn_in = 100\n").unwrap();
        assert!(matches!(load_config(Some(f.path())), Err(ConfigError::Invalid(_))));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[data]\nlocation_cov = [100.0, 200.0, 100.0]\n").unwrap();
        assert!(matches!(load_config(Some(f.path())), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = RunConfig::default();
        c.sampler.thin = 11;
        assert_ne!(a.hash(), c.hash());
    }
}
