//! Run configuration: a JSON file, then an algorithm preset, then flags.

use std::path::{Path, PathBuf};

use flexsdr::digest::sha256_hex;
use flexsdr::embed::EmbedderConfig;
use flexsdr::eval::EtaGrid;
use flexsdr::judge::JudgeConfig;
use flexsdr::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Parent of timestamped run directories.
    pub output_dir: PathBuf,
    pub embedder: EmbedderConfig,
    pub judge: JudgeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from("runs"),
            embedder: EmbedderConfig::default(),
            judge: JudgeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub failure_budget: usize,
    /// Shots for the fixed-k baselines and PromptPG.
    pub k: usize,
    pub split: String,
    /// Threshold grid searched on the validation slice.
    pub eta_grid: EtaGrid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            failure_budget: 0,
            k: 4,
            split: "test".into(),
            eta_grid: EtaGrid {
                start: -1.0,
                end: 1.0,
                step: 0.01,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&[&bytes])[..16].to_string()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.k == 0 {
            return Err(CliError::Config("eval.k must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset: pass --dataset or set `dataset` in the config".into()))
    }
}

/// `explicit`, or `<output_dir>/<UTC timestamp>-<hash>`.
pub fn run_dir(cfg: &RunConfig, explicit: Option<&Path>, hash: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            cfg.output_dir.join(format!("{stamp}-{hash}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.episodes += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"train": {"episodes": 3}}"#).unwrap();
        assert_eq!(c.train.episodes, 3);
        assert_eq!(c.train.batch_size, 16);
    }
}
