//! Loss stack, optimizer, feature normalization, checkpoints and the
//! training loop combining mix-up and cycle-consistency terms.

mod checkpoint;
mod losses;
mod optim;
mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugmentError, MixupConfig};
use crate::nn::{ModelConfig, NnError};
use crate::score_io::ScoreError;

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{
    combined_svs_loss, cycle_losses, frame_cross_entropy, masked_l1, mixture_loss, total_loss, NormStats, Sample,
};
pub use optim::{noam_lr, AdamState, OptimizerConfig};
pub use trainer::{EpochRecord, FitSummary, LossTerms, RunDir, StepMetrics, TrainHistory, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Weights of the total objective `w_svs L_svs + w_si L_si + w_pd L_pd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_svs: f64,
    pub w_si: f64,
    pub w_pd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::CC1
    }
}

impl LossWeights {
    pub const BASELINE: Self = Self {
        w_svs: 1.0,
        w_si: 0.0,
        w_pd: 0.0,
    };
    pub const CC1: Self = Self {
        w_svs: 0.7,
        w_si: 0.2,
        w_pd: 0.1,
    };
    pub const CC2: Self = Self {
        w_svs: 0.85,
        w_si: 0.1,
        w_pd: 0.05,
    };
    pub const CC3: Self = Self {
        w_svs: 1.0,
        w_si: 1.0,
        w_pd: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_svs, self.w_si, self.w_pd];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::Config(format!("loss weights must be non-negative, got {all:?}")));
        }
        if all.iter().sum::<f64>() <= 0.0 {
            return Err(TrainError::Config("loss weights sum to zero".into()));
        }
        Ok(())
    }
}

/// Everything the training loop needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub mixup: MixupConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Mix-up on expanded hidden states.
    pub ma: bool,
    /// Cycle-consistency losses through the predictor.
    pub cc: bool,
    /// Also feed mix-up outputs through the predictor for `L_pd`.
    pub mixup_in_cycle: bool,
    /// Number of per-epoch checkpoints kept on disk.
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            mixup: MixupConfig::default(),
            weights: LossWeights::default(),
            batch_size: 8,
            epochs: 300,
            seed: 0,
            ma: false,
            cc: false,
            mixup_in_cycle: false,
            keep_checkpoints: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.mixup.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.keep_checkpoints == 0 {
            return Err(TrainError::Config("keep_checkpoints must be positive".into()));
        }
        Ok(())
    }
}

/// Independent random streams, so toggling one feature never perturbs the
/// randomness seen by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RngStream {
    Init = 1,
    Dropout = 2,
    Mixup = 3,
    Predictor = 4,
    Shuffle = 5,
    Augment = 6,
}

/// Generator for `(seed, stream, index)`, e.g. one per training step.
pub fn rng_stream(seed: u64, stream: RngStream, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stream as u8]);
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
