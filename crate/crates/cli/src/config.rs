use std::fs;
use std::path::{Path, PathBuf};

use la2former::model::ModelConfig;
use la2former::training::{LossVariant, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a training-type command needs, as read from `--config` and
/// then overridden by flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no dataset given (use --data or \"data\" in the config)".into()))?;
        if !dir.join("manifest.json").is_file() {
            return Err(CliError::Usage(format!("no dataset found at {}", dir.display())));
        }
        Ok(dir)
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory given (use --out or \"out\" in the config)".into()))
    }
}

/// Text for `--help` listing every default of the run config.
pub fn defaults_help() -> String {
    let json = serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes");
    format!(
        "Run config defaults (JSON for --config; unknown keys are rejected, flags win):\n{json}\n\n\
         A null model.ff_hidden means twice the hidden width. The loss is squared_ratio or root_ratio."
    )
}

pub fn parse_loss(s: &str) -> Result<LossVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown loss '{s}', expected squared_ratio or root_ratio"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"model": {"layers": 4}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.model.hidden, ModelConfig::default().hidden);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"layer": 2}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 1.0}}"#).is_err());
    }

    #[test]
    fn loss_names() {
        assert_eq!(parse_loss("root_ratio"), Ok(LossVariant::RootRatio));
        assert!(parse_loss("l1").is_err());
    }
}
