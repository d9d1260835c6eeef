//! Run configuration: one JSON document covering the model, diffusion,
//! data generation, training, evaluation and ablation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::features::Dims;
use crate::model::{DiffusionConfig, ModelConfig};
use crate::nn::BlockConfig;
use crate::training::{StageConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: SynthConfig,
    /// Sequences written by `gen-data` when no count is given.
    pub count: usize,
    /// Sequences held out from the end of the dataset by `ablate`.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { generator: SynthConfig::default(), count: 64, holdout: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_sequence: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_sequence: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub data: DataConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Small model and short schedule for CPU experiments.
    pub fn toy() -> Self {
        let block = BlockConfig { width: 32, heads: 4, encoder_layers: 2, decoder_layers: 2 };
        let stage = |steps| StageConfig { steps, learning_rate: 1e-3 };
        Self {
            model: ModelConfig { human: block.clone(), object: block, ..ModelConfig::default() },
            data: DataConfig { count: 32, holdout: 8, ..DataConfig::default() },
            training: TrainConfig { stages: [stage(400), stage(200), stage(200)], ..TrainConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.generator.validate()?;
        self.dims().validate()?;
        self.training.validate()?;
        if self.diffusion.steps == 0 {
            return Err(Error::Config("diffusion.steps must be at least 1".into()));
        }
        if self.eval.samples_per_sequence == 0 {
            return Err(Error::Config("eval.samples_per_sequence must be at least 1".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Model dimensions implied by the data settings: one contact group per
    /// joint.
    pub fn dims(&self) -> Dims {
        let g = &self.data.generator;
        Dims { joints: g.joints, groups: g.joints, subset_size: g.subset_size, past_len: g.past_len, future_len: g.future_len }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"model": {"widht": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"diffusion": {"steps": 50}}"#).unwrap();
        assert_eq!(cfg.diffusion.steps, 50);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_json(r#"{"model": {"human": {"width": 30, "heads": 4}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"training": {"weights": {"lambda_c": -1.0}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"diffusion": {"steps": 0}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
        }
    }
}
