//! Composite objective, step learning-rate schedule and the seeded SGD loop.

mod ablation;
mod batch;
mod check;
mod fit;
mod loss;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use ablation::{ablation_grid, AblationPoint};
pub use batch::{Batch, TextTable};
pub use check::check_loss_gradients;
pub use fit::{fit, narration_embedder, EpochMetrics, FitReport, TEXT_TABLE_NAME};
pub use loss::{composite_loss, forward, ForwardOutputs, LossBreakdown, TextOutputs};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("action {action} from non-source domain {domain} reached a training batch")]
    TargetLeak { action: usize, domain: u32 },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextLossKind {
    /// Mean squared error between reconstructed and original text features.
    #[default]
    Mse,
    /// Mean cross-entropy of the center narration's tokens under the
    /// vocabulary head applied to the reconstructed center row.
    TokenCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_rv: f64,
    pub lambda_rt: f64,
    pub text_loss: TextLossKind,
    pub p_mix: f64,
    pub seqmix_exclude_center: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_rv: 1.0,
            lambda_rt: 1.0,
            text_loss: TextLossKind::Mse,
            p_mix: 0.5,
            seqmix_exclude_center: false,
            batch_size: 32,
            lr: 0.005,
            lr_decay_epochs: vec![50, 75],
            lr_decay_factor: 10.0,
            epochs: 100,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [("lambda_rv", self.lambda_rv), ("lambda_rt", self.lambda_rt)] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("train.{name} must be finite and >= 0, got {x}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push(format!("train.lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.p_mix) {
            v.push(format!("train.p_mix must lie in [0, 1], got {}", self.p_mix));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be >= 1".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[1] <= w[0]) {
            v.push(format!(
                "train.lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            v.push(format!(
                "train.lr_decay_factor must be finite and > 0, got {}",
                self.lr_decay_factor
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(v))
        }
    }

    pub fn reconstructs(&self) -> bool {
        self.lambda_rv > 0.0 || self.lambda_rt > 0.0
    }
}

/// Step schedule: `lr / factor^k` where `k` counts decay epochs `<= epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr / cfg.lr_decay_factor.powi(k as i32)
}
