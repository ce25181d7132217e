//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::nets::{DiscriminatorConfig, GeneratorConfig};
use crate::schedule::ScheduleParams;
use crate::train::data::DataConfig;
use crate::train::TrainRunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleParams,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainRunConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            schedule: ScheduleParams::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainRunConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        match &self.data {
            DataConfig::Synth(s) => {
                s.validate()?;
                if s.task() != self.train.task {
                    return Err(Error::Config(format!(
                        "train.task is {} but the data config describes {}",
                        self.train.task.as_str(),
                        s.task().as_str()
                    )));
                }
            }
            DataConfig::Mixture(m) => m.validate()?,
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[schedule]\nn_steps = 2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.n_steps, 2);
        assert_eq!(cfg.train, TrainRunConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(ExperimentConfig::from_toml("sede = 1"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("[train]\nr1_weight = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[schedule]\nt_eps = 0.5\n").is_err());
    }

    #[test]
    fn mixture_round_trips() {
        let cfg = ExperimentConfig {
            data: DataConfig::Mixture(Default::default()),
            ..Default::default()
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
