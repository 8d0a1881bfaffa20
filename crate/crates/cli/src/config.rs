use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use probsam_core::data::SynthConfig;
use probsam_core::metrics::{SamplingMode, DEFAULT_SAMPLES};
use probsam_core::model::ModelConfig;
use probsam_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub m: usize,
    pub split: String,
    pub mode: SamplingMode,
    pub baseline: Option<SamplingMode>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { m: DEFAULT_SAMPLES, split: "test".into(), mode: SamplingMode::Prior, baseline: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub m: usize,
    pub mode: SamplingMode,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { m: 4, mode: SamplingMode::Prior }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunInfo {
    pub command: String,
    pub out: PathBuf,
    pub inputs: BTreeMap<String, String>,
    pub options: BTreeMap<String, String>,
}

/// Configuration file contents; after overrides, the resolved record written
/// next to every command's outputs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run: RunInfo,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sample: SampleSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn begin(&mut self, command: &str, seed: Option<u64>, out: &Path) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.run.command = command.into();
        self.run.out = out.to_path_buf();
    }

    pub fn input(&mut self, key: &str, value: impl std::fmt::Display) {
        self.run.inputs.insert(key.into(), value.to_string());
    }

    pub fn option(&mut self, key: &str, value: impl std::fmt::Display) {
        self.run.options.insert(key.into(), value.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\nsteps = 7\n[data]\nn_samples = 5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.data.n_samples, 5);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nstpes = 7\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.begin("train", Some(9), Path::new("out"));
        cfg.input("data", "d");
        cfg.eval.baseline = Some(SamplingMode::Dropout);
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.run.inputs["data"], "d");
        assert_eq!(back.eval.baseline, Some(SamplingMode::Dropout));
        assert_eq!(back.train, cfg.train);
    }
}
