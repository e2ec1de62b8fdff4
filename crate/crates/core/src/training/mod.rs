//! Adversarial and latent reconstruction losses, and the three-step
//! alternating optimization over disjoint parameter groups.

mod losses;
mod trainer;

pub use losses::{
    adversarial_terms, generator_objective, latent_distance, loss_adv_image, loss_adv_video,
    loss_rec, reconstruction_terms, AdvTerms, GenLoss, RecNorm, RecTerms,
};
pub use trainer::{train, Phase, Sampler, StepReport, TrainObserver, Trainer, GROUPS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataError;
use crate::networks::ModelConfig;
use crate::tensor::{AdamConfig, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset videos have shape {found:?}, model expects {expected:?}")]
    Geometry { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite loss at iteration {step}, step {phase}: {losses:?}")]
    NonFinite {
        step: u64,
        phase: Phase,
        losses: BTreeMap<String, f64>,
    },
    #[error("{0}")]
    Observer(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Weight of the motion-latent reconstruction term.
    pub k1: f64,
    /// Weight of the appearance-latent reconstruction term.
    pub k2: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub rec_norm: RecNorm,
    pub gen_loss: GenLoss,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            k1: 1.0,
            k2: 1.0,
            batch: 8,
            steps: 2000,
            seed: 0,
            rec_norm: RecNorm::SquaredL2,
            gen_loss: GenLoss::Saturating,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Serialize)]
struct FingerprintView<'a> {
    model: &'a ModelConfig,
    adam: &'a AdamConfig,
    k1: f64,
    k2: f64,
    batch: usize,
    seed: u64,
    rec_norm: RecNorm,
    gen_loss: GenLoss,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, k) in [("k1", self.k1), ("k2", self.k2)] {
            if !(k.is_finite() && k >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {k}"));
            }
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.alpha > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad(format!("invalid Adam constants {a:?}"));
        }
        if !self.model.use_motion_encoder && self.k1 != 0.0 {
            return bad("k1 must be 0 when the motion encoder is disabled".into());
        }
        Ok(())
    }

    /// Hash of everything that determines a run's trajectory apart from its
    /// length and reporting cadence.
    pub fn fingerprint(&self) -> u64 {
        let view = FingerprintView {
            model: &self.model,
            adam: &self.adam,
            k1: self.k1,
            k2: self.k2,
            batch: self.batch,
            seed: self.seed,
            rec_norm: self.rec_norm,
            gen_loss: self.gen_loss,
        };
        let json = serde_json::to_vec(&view).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
