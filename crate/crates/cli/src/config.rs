//! Run configuration: one JSON document describing a complete experiment.
//! Unknown keys are rejected so a typo never silently falls back to a
//! default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svs_aug::augment::{MixupConfig, ShiftPolicy};
use svs_aug::dsp::AudioConfig;
use svs_aug::nn::ModelConfig;
use svs_aug::training::{LossWeights, OptimizerConfig, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Silence in seconds that separates two phrases of a song.
    pub min_gap: f64,
    /// Shift draws per phrase when pitch augmentation is materialized.
    pub pa_copies: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            manifest: None,
            min_gap: 0.3,
            pa_copies: 2,
            valid_fraction: 0.075,
            test_fraction: 0.075,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Pitch augmentation.
    pub pa: bool,
    /// Mix-up of encoder outputs.
    pub ma: bool,
    /// Cycle-consistency losses through the score predictor.
    pub cc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub shift_policy: ShiftPolicy,
    pub mixup: MixupConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub toggles: Toggles,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mixup_in_cycle: bool,
    pub keep_checkpoints: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: DataConfig::default(),
            audio: AudioConfig::default(),
            model: t.model,
            shift_policy: ShiftPolicy::default(),
            mixup: t.mixup,
            weights: t.weights,
            optimizer: t.optimizer,
            toggles: Toggles::default(),
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            mixup_in_cycle: t.mixup_in_cycle,
            keep_checkpoints: t.keep_checkpoints,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON with a trailing newline, as frozen into run directories.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        let d = &self.data;
        if !(d.min_gap > 0.0 && d.min_gap.is_finite()) {
            return usage(format!("data.min_gap must be positive, got {}", d.min_gap));
        }
        if d.pa_copies == 0 {
            return usage("data.pa_copies must be positive".into());
        }
        let (v, t) = (d.valid_fraction, d.test_fraction);
        if !(v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            return usage(format!("split fractions {v} and {t} must be non-negative and leave a training split"));
        }
        self.audio.validate().map_err(|e| CliError::usage(format!("audio: {e}")))?;
        if self.audio.n_mels != self.model.mel_dims {
            return usage(format!(
                "audio.n_mels ({}) must equal model.mel_dims ({})",
                self.audio.n_mels, self.model.mel_dims
            ));
        }
        // An adaptive policy without a mean takes it from the manifest.
        if let Some(m) = self.shift_policy.dataset_mean_pitch {
            if !m.is_finite() {
                return usage(format!("shift_policy.dataset_mean_pitch must be finite, got {m}"));
            }
        }
        self.train_config().validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            mixup: self.mixup.clone(),
            weights: self.weights,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            ma: self.toggles.ma,
            cc: self.toggles.cc,
            mixup_in_cycle: self.mixup_in_cycle,
            keep_checkpoints: self.keep_checkpoints,
        }
    }
}
