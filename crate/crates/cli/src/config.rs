use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use storyagent_core::denoiser::DenoiserConfig;
use storyagent_core::evaluate::EvalConfig;
use storyagent_core::lora_be::TrainConfig;
use storyagent_core::orchestrator::RunConfig;
use storyagent_core::pretrain::PretrainConfig;
use storyagent_service::ServiceConfig;

use crate::CliError;

/// Listener settings for `serve`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub bind: String,
    pub max_concurrent_runs: usize,
    pub review_timeout_secs: u64,
}

impl Default for ServeSection {
    fn default() -> Self {
        let s = ServiceConfig::default();
        Self {
            bind: s.bind,
            max_concurrent_runs: s.max_concurrent_runs,
            review_timeout_secs: s.review_timeout_secs,
        }
    }
}

/// The JSON file passed with `--config`. Every section is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Subjects, artifacts and run logs live here.
    pub data_dir: PathBuf,
    /// Base checkpoint written by `pretrain`. Without one, commands fall back
    /// to an untrained initialisation of `model` seeded by `model_seed`.
    pub base_checkpoint: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub model_seed: u64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
    pub service: ServeSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("storyagent-data"),
            base_checkpoint: None,
            model: DenoiserConfig::default(),
            model_seed: 0,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            run: RunConfig::default(),
            eval: EvalConfig::default(),
            service: ServeSection::default(),
        }
    }
}

impl CliConfig {
    /// Reads a config file; unknown keys are reported with their path.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_slice(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            CliError::Usage(format!("config {} at '{at}': {}", path.display(), e.into_inner()))
        })
    }

    /// Applies the global `--seed` to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model_seed = s;
            self.pretrain.seed = s;
            self.train.seed = s;
            self.run.seed = s;
            self.eval.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: storyagent_core::Error| CliError::Usage(format!("config: {e}"));
        self.model.validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.run.validate().map_err(usage)?;
        self.service_config()
            .validate()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(())
    }

    pub fn service_config(&self) -> ServiceConfig {
        ServiceConfig {
            bind: self.service.bind.clone(),
            store_path: self.data_dir.clone(),
            max_concurrent_runs: self.service.max_concurrent_runs,
            review_timeout_secs: self.service.review_timeout_secs,
            base_checkpoint: self.base_checkpoint.clone(),
            model: self.model.clone(),
            model_seed: self.model_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"lr": 0.001, "epoch": 3}}"#).unwrap();
        let err = CliConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("'train.epoch'"), "{err}");
    }

    #[test]
    fn empty_object_is_the_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{}").unwrap();
        assert_eq!(CliConfig::load(&path).unwrap(), CliConfig::default());
    }

    #[test]
    fn shipped_tiny_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json");
        let cfg = CliConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model, DenoiserConfig::tiny());
    }
}
