//! Training run configuration, read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub optimizer: AdamConfig,
    pub batch_clips: usize,
    pub clip_len: usize,
    /// Epochs with ground-truth previous masks.
    pub epochs_phase1: usize,
    /// Epochs with the model's own previous masks.
    pub epochs_phase2: usize,
    pub seed: u64,
    /// Share of sequences held out for validation; 0 disables validation.
    pub val_fraction: f64,
    /// Validate every this many epochs (and always at phase ends); 0 validates only at phase ends.
    pub val_every: usize,
    /// Zero the optimizer moments when phase 2 starts.
    pub reset_moments: bool,
    /// Zero-shot only: match objects to slots on each clip's first frame.
    pub first_frame_only: bool,
    /// Stop once this many optimizer steps have run.
    pub max_steps: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: Mode::ZeroShot,
            optimizer: AdamConfig::default(),
            batch_clips: 4,
            clip_len: 5,
            epochs_phase1: 20,
            epochs_phase2: 20,
            seed: 0,
            val_fraction: 0.2,
            val_every: 1,
            reset_moments: false,
            first_frame_only: false,
            max_steps: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.clip_len < 2 {
            return bad(format!("clip_len must be at least 2, got {}", self.clip_len));
        }
        if self.batch_clips == 0 {
            return bad("batch_clips must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} must lie in [0, 1)", self.val_fraction));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        match self.mode {
            Mode::ZeroShot if self.model.use_prev_mask => {
                bad("zero-shot mode requires model.use_prev_mask = false".into())
            }
            Mode::OneShot if !self.model.use_prev_mask => {
                bad("one-shot mode requires model.use_prev_mask = true".into())
            }
            Mode::OneShot if self.first_frame_only => bad("first_frame_only applies to zero-shot mode only".into()),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs_phase1 + cfg.epochs_phase2, 40);
        assert_eq!((cfg.batch_clips, cfg.clip_len), (4, 5));
        assert_eq!(cfg.model.slots, 10);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"epochs_phase2": 0, "seed": 3}"#).unwrap();
        assert_eq!(cfg.epochs_phase2, 0);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.clip_len, 5);
    }

    #[test]
    fn mode_and_mask_input_must_agree() {
        let mut cfg = RunConfig {
            mode: Mode::OneShot,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.model.use_prev_mask = true;
        cfg.validate().unwrap();
        cfg.clip_len = 1;
        assert!(cfg.validate().is_err());
    }
}
