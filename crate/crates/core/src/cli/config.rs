use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::corpus::{Partition, DEFAULT_RATIOS};
use crate::diagnostics::{TsneConfig, DEFAULT_SAMPLES};
use crate::model::ModelConfig;
use crate::tokenizer::{DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};
use crate::trainer::TrainConfig;

/// Everything a subcommand may need. Loaded from a JSON file when given;
/// command-line flags take precedence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub members: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Required by every stochastic subcommand.
    pub seed: Option<u64>,
    pub ratios: [f64; 3],
    pub stratify: bool,
    pub vocab_size: usize,
    pub max_len: usize,
    /// `vocab_size`, `max_len` and `n_classes` are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mc_samples: usize,
    pub tsne: TsneConfig,
    pub partition: Partition,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            rules: None,
            stopwords: None,
            split: None,
            vocab: None,
            checkpoint: None,
            members: None,
            output_dir: PathBuf::from("out"),
            seed: None,
            ratios: DEFAULT_RATIOS,
            stratify: false,
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_len: DEFAULT_MAX_LEN,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mc_samples: DEFAULT_SAMPLES,
            tsne: TsneConfig::default(),
            partition: Partition::Test,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub(super) fn resolve(file: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut config = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(out) = out {
            config.output_dir = out;
        }
        if seed.is_some() {
            config.seed = seed;
        }
        Ok(config)
    }

    pub fn require_seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| {
            CliError::usage(format!(
                "{command} needs a seed: pass --seed or set \"seed\" in the config file"
            ))
        })
    }
}

/// `flag` if given, else the config value, else a usage error naming the flag.
pub(super) fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| config.clone()).ok_or_else(|| {
        CliError::usage(format!(
            "missing --{name} (or \"{}\" in the config file)",
            name.replace('-', "_")
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 2e-5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.max_epochs, 50);
        assert_eq!(c.train.patience, 5);
        assert_eq!(c.max_len, 128);
        assert_eq!(c.ratios, [0.5, 0.25, 0.25]);
        assert_eq!(c.model.n_classes, 23);
    }

    #[test]
    fn partial_json_keeps_defaults_and_rejects_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "train": {"lr": 0.001}}"#).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.patience, 5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
    }
}
