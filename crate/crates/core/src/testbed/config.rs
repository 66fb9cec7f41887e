use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::DataSpec;
use super::model::ModelSpec;
use super::schedule::WsdSchedule;
use super::TrainError;
use crate::merge::MergeStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    HighLr,
}

/// Multiplies the scheduled learning rate from `at_step` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeDirective {
    pub mode: SpikeMode,
    pub lr_multiplier: f64,
    pub at_step: u64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Random,
    /// Resume from one checkpoint, optionally with its momentum sidecar.
    Checkpoint {
        path: String,
        #[serde(default = "default_true")]
        load_momentum: bool,
    },
    /// Start from a merge of several checkpoints.
    PmaInit {
        paths: Vec<String>,
        strategy: MergeStrategy,
        /// Zero the momentum buffer instead of merging the sidecars with the
        /// same weights.
        #[serde(default = "default_true")]
        reset_momentum: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
    /// Absolute step at which training stops.
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: WsdSchedule,
    pub checkpoint_every: u64,
    pub tokens_per_step: u64,
    #[serde(default)]
    pub spike: Option<SpikeDirective>,
    #[serde(default)]
    pub init: InitSpec,
    /// Completed steps carried over from the run being resumed.
    #[serde(default)]
    pub start_step: u64,
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| TrainError::Config(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(TrainError::Config("steps, batch_size and checkpoint_every must be positive".into()));
        }
        if !self.steps.is_multiple_of(self.checkpoint_every) {
            return Err(TrainError::Config(format!(
                "checkpoint_every ({}) must divide steps ({})",
                self.checkpoint_every, self.steps
            )));
        }
        if self.schedule.total_steps() < self.steps {
            return Err(TrainError::Config(format!(
                "schedule covers {} steps but training runs to step {}",
                self.schedule.total_steps(),
                self.steps
            )));
        }
        if self.start_step >= self.steps {
            return Err(TrainError::Config(format!(
                "start_step ({}) must be below steps ({})",
                self.start_step, self.steps
            )));
        }
        if let Some(spike) = &self.spike {
            if spike.at_step >= self.steps {
                return Err(TrainError::Config("spike.at_step must be below steps".into()));
            }
            if !(spike.lr_multiplier > 1.0 && spike.lr_multiplier.is_finite()) {
                return Err(TrainError::Config("spike.lr_multiplier must exceed 1".into()));
            }
        }
        match &self.init {
            InitSpec::PmaInit { paths, strategy, .. } => {
                if paths.is_empty() {
                    return Err(TrainError::Config("pma_init needs at least one checkpoint".into()));
                }
                strategy.validate()?;
            }
            InitSpec::Checkpoint { path, .. } if path.is_empty() => {
                return Err(TrainError::Config("checkpoint init needs a path".into()));
            }
            _ => {}
        }
        Ok(())
    }
}
