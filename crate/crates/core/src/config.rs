//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::PairConfig;
use crate::error::{Error, Result};
use crate::evalstats::{Compositions, EvalConfig, Experiment, ImitateHyper};
use crate::transfer::TransferHyper;

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pair: PairConfig,
    #[serde(default)]
    pub compositions: Compositions,
    #[serde(default)]
    pub transfer_hyper: TransferHyper,
    #[serde(default)]
    pub imitate_hyper: ImitateHyper,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Parses `text`, resolving relative paths against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.pair.validate()?;
        self.transfer_hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.eval.rollouts == 0 {
            return Err(Error::Config("eval.rollouts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            pair: self.pair.clone(),
            compositions: self.compositions.clone(),
            transfer: self.transfer_hyper.clone(),
            imitate: self.imitate_hyper.clone(),
            eval: self.eval.clone(),
            seeds: self.seeds.clone(),
        }
    }

    /// The fully populated configuration, as JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_filled_with_defaults() {
        let cfg = RunConfig::parse(r#"{"pair": {"pair": "identity"}}"#, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(cfg.output_dir, Path::new("/cfg/results"));
        assert_eq!(cfg.transfer_hyper, TransferHyper::default());
        let again = RunConfig::parse(&cfg.to_json(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"pair": {"pair": "identity"}, "extra": 1}"#,
            r#"{"pair": {"pair": "identity"}, "transfer_hyper": {"latentdim": 3}}"#,
            r#"{"pair": {"pair": "identity", "radius": 1}}"#,
            r#"{"pair": {"pair": "identity"}, "eval": {"rollouts": 0}}"#,
            r#"{"pair": {"pair": "identity"}, "seeds": []}"#,
        ] {
            assert!(matches!(RunConfig::parse(text, Path::new(".")), Err(Error::Config(_))), "{text}");
        }
    }
}
