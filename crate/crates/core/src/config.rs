//! Pipeline configuration: one TOML file covering every stage, with
//! sensible defaults for all of it. Unknown keys are rejected so typos
//! surface as configuration errors instead of silently applied defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CohortDefaults, DrugList, SplitFractions};
use crate::mdp::RewardTiming;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Ingestion knobs: the co-analgesic drug list (exactly 16 names, which
/// fixes the state layout) and the imputation fallbacks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestionConfig {
    pub coanalgesics: DrugList,
    pub defaults: CohortDefaults,
}

/// Evaluation knobs: how many simulated patients to roll per policy and
/// for how long, plus how many rollouts to spend on validation during
/// training (0 disables simulator validation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rollout_episodes: u32,
    pub rollout_horizon_hours: u64,
    pub validation_rollouts: u32,
    pub rollout_seed: u64,
    /// Seed for checkpoint-selection rollouts during training. Kept apart
    /// from `rollout_seed` so selection never sees the evaluation episodes.
    pub validation_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rollout_episodes: 200,
            rollout_horizon_hours: 72,
            validation_rollouts: 20,
            rollout_seed: 1,
            validation_seed: 2,
        }
    }
}

/// Everything the pipeline can be told, in one file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub cohort: SynthConfig,
    pub ingestion: IngestionConfig,
    pub split: SplitFractions,
    pub reward_timing: RewardTiming,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.split.validate()?;
        self.training.validate()?;
        Ok(())
    }
}
