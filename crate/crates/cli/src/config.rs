//! One JSON document holding every stage's settings.

use std::path::{Path, PathBuf};

use anyhow::Context;
use pulsebp_core::preprocess::{CleaningPolicy, FilterConfig};
use pulsebp_core::segmentation::SegmentConfig;
use pulsebp_core::waveform::{cohort_configs, CohortConfig};
use pulsebp_model::training::TrainConfig;
use pulsebp_model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AtPath, ErrorKind, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Source of all randomness: synthesis, fold shuffles, initialization
    /// and dropout. Overrides `train.seed`.
    pub seed: u64,
    pub cohort: CohortConfig,
    pub cleaning: CleaningPolicy,
    pub filter: FilterConfig,
    pub segment: SegmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parallel_folds: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cohort: CohortConfig::default(),
            cleaning: CleaningPolicy::default(),
            filter: FilterConfig::default(),
            segment: SegmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            parallel_folds: 1,
            out_dir: None,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    Failure::new(ErrorKind::Validation, e.to_string()).into()
}

impl PipelineConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).context(AtPath(path.to_path_buf()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("config: {e}")))
            .context(AtPath(path.to_path_buf()))?;
        cfg.validate().context(AtPath(path.to_path_buf()))?;
        Ok(cfg)
    }

    /// Checks every section against its owning module's rules.
    pub fn validate(&self) -> anyhow::Result<()> {
        for c in cohort_configs(&self.cohort, self.seed).map_err(invalid)? {
            c.validate().map_err(invalid)?;
        }
        self.cleaning.validate().map_err(invalid)?;
        self.filter.bandpass(self.cohort.fs).validate().map_err(invalid)?;
        if self.filter.maf_window == 0 || self.filter.maf_passes == 0 {
            return Err(invalid("filter.maf_window and filter.maf_passes must be >= 1"));
        }
        self.segment.validate().map_err(invalid)?;
        self.model_config().validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.parallel_folds == 0 {
            return Err(invalid("parallel_folds must be >= 1"));
        }
        Ok(())
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Model settings with the training dropout applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { dropout_p: self.train.dropout_p, ..self.model.clone() }
    }

    /// The configuration actually used, as written next to run outputs.
    pub fn effective(&self) -> Self {
        Self { train: self.train_config(), model: self.model_config(), out_dir: None, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train_config().seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"train": {"epoch": 1}}"#).is_err());
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let bad = PipelineConfig { train: TrainConfig { folds: 1, ..TrainConfig::default() }, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { model: ModelConfig { pool_factor: 5, ..ModelConfig::default() }, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut bad = PipelineConfig::default();
        bad.filter.f_high = 40.0;
        assert!(bad.validate().is_err());
    }
}
