//! Run configuration: one strict JSON document covering the generator, the
//! pipeline structure, the optimizer and the run paths. Unknown keys are
//! rejected at every level.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::PipelineConfig;
use crate::pipeline::PipelineMode;
use crate::toytask::{GenConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub gen: GenConfig,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Class-embedding table for cosine mode.
    pub embedding_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pipeline.validate()?;
        self.gen.validate()?;
        if self.pipeline.mode == PipelineMode::Cosine && self.embedding_file.is_none() {
            return Err(crate::error::Error::Config(
                "cosine mode requires embedding_file".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&json).unwrap(), cfg);
    }

    #[test]
    fn empty_object_uses_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::parse(r#"{"mystery": 1}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"lr": 0.1, "mystery": 1}}"#).is_err());
        assert!(RunConfig::parse(r#"{"gen": {"mystery": 1}}"#).is_err());
    }

    #[test]
    fn cosine_mode_requires_embedding_path() {
        let json = r#"{"pipeline": {"n_dim":16,"d0":16,"d1":16,"d2":16,"t_layers":2,"heads":3,
            "thing_classes":3,"stuff_classes":3,"mode":"cosine","leaky_slope":0.2}}"#;
        assert!(RunConfig::parse(json).is_err());
        let json = r#"{"pipeline": {"n_dim":16,"d0":16,"d1":16,"d2":16,"t_layers":2,"heads":3,
            "thing_classes":3,"stuff_classes":3,"mode":"cosine","leaky_slope":0.2},
            "embedding_file": "emb.json"}"#;
        assert!(RunConfig::parse(json).is_ok());
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(RunConfig::parse(r#"{"train": {"lr": -0.5}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"lr_drops": [170, 120]}}"#).is_err());
    }
}
