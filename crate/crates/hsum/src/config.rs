//! One JSON file describing a full experiment: where the dataset lives, the
//! model geometry, the training protocol, the evaluation protocol, and how
//! summaries are selected. Unknown keys are rejected so typos fail loudly.

use crate::error::{HsumError, Result};
use crate::network::ModelConfig;
use crate::summarizer::{SummaryMode, DEFAULT_BUDGET_RATIO, DEFAULT_TOPK_FRACTION};
use crate::trainer::{EvalProtocol, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Summary-selection settings carried by an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarySettings {
    pub mode: SummaryMode,
    /// Fraction of total frames the knapsack budget allows.
    pub budget_ratio: f64,
    /// Fraction of frames kept by top-k selection.
    pub topk_fraction: f64,
}

impl Default for SummarySettings {
    fn default() -> Self {
        SummarySettings {
            mode: SummaryMode::Knapsack,
            budget_ratio: DEFAULT_BUDGET_RATIO,
            topk_fraction: DEFAULT_TOPK_FRACTION,
        }
    }
}

impl SummarySettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("budget_ratio", self.budget_ratio),
            ("topk_fraction", self.topk_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(HsumError::Config(format!(
                    "{name} must be in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything one experiment needs, loadable from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest path. Optional in the file so committed configs stay
    /// machine-independent; commands that need data accept an override flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    #[serde(default)]
    pub summary: SummarySettings,
}

impl ExperimentConfig {
    /// Parse a config file. A relative `dataset` path is resolved against
    /// the config file's directory, so configs work from any working
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HsumError::io(path, e))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| HsumError::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
        if let Some(dataset) = &config.dataset {
            if dataset.is_relative() {
                if let Some(dir) = path.parent() {
                    config.dataset = Some(dir.join(dataset));
                }
            }
        }
        Ok(config)
    }

    /// Check every field range and, for paths that are set, existence.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.validate_eval()?;
        self.summary.validate()?;
        if let Some(dataset) = &self.dataset {
            if !dataset.exists() {
                return Err(HsumError::MissingFile(dataset.clone()));
            }
        }
        Ok(())
    }

    fn validate_eval(&self) -> Result<()> {
        if self.eval.map_rhos.is_empty() {
            return Err(HsumError::Config(
                "eval.map_rhos must name at least one fraction".into(),
            ));
        }
        for &rho in &self.eval.map_rhos {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(HsumError::Config(format!(
                    "eval.map_rhos entries must be in (0, 1], got {rho}"
                )));
            }
        }
        if !self.eval.threshold.is_finite() {
            return Err(HsumError::Config(
                "eval.threshold must be finite".into(),
            ));
        }
        Ok(())
    }
}
