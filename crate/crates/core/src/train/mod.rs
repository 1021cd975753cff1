//! Pretraining over a collection, linear-probe finetuning with early
//! stopping, the optimizer, and on-disk checkpoints.

mod checkpoint;
mod finetune;
mod optim;
mod pretrain;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use finetune::{
    evaluate, finetune, finetune_features, stratified_split, EarlyStopper, EpochRecord,
    FinetuneOutcome, MetricsReport, StopDecision,
};
pub use optim::{clip_gradients, AdamHyper, AdamState};
pub use pretrain::{
    objective_graph, PretrainSettings, Pretrainer, RngState, RngStreams, StepBatch, StepLoss,
    StepRecord, Telemetry, TELEMETRY_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, XitError};
use crate::objective::DEFAULT_OBJECTIVE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    /// Number of optimizer steps.
    pub steps: usize,
    /// Objective name, see [`crate::objective::objectives`].
    pub ablation: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            steps: 2000,
            ablation: DEFAULT_OBJECTIVE.to_string(),
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> XitError {
    XitError::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn check_optimizer(
    section: &str,
    lr: f64,
    wd: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    clip: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err(
            &format!("{section}.learning_rate"),
            "must be > 0",
        ));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return Err(config_err(
            &format!("{section}.weight_decay"),
            "must be >= 0",
        ));
    }
    for (key, b) in [("adam_beta1", b1), ("adam_beta2", b2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(config_err(
                &format!("{section}.{key}"),
                "must lie in [0, 1)",
            ));
        }
    }
    if !(eps > 0.0) {
        return Err(config_err(&format!("{section}.adam_eps"), "must be > 0"));
    }
    if !(clip > 0.0) {
        return Err(config_err(
            &format!("{section}.grad_clip_norm"),
            "must be > 0",
        ));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err("train.batch_size", "must be >= 2"));
        }
        check_optimizer(
            "train",
            self.learning_rate,
            self.weight_decay,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.grad_clip_norm,
        )
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    /// Epochs without validation-AUROC improvement before stopping.
    pub patience_epochs: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Stratified share of the training split held out for early stopping.
    /// With 0 the training split itself is monitored.
    pub validation_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 64,
            learning_rate: 1.4e-4,
            weight_decay: 1.6e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            patience_epochs: 4,
            min_steps: 40,
            max_steps: 2000,
            validation_fraction: 0.2,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(config_err("finetune.batch_size", "must be >= 1"));
        }
        if self.min_steps > self.max_steps || self.max_steps == 0 {
            return Err(config_err(
                "finetune.min_steps",
                format!(
                    "need 0 < max_steps and min_steps <= max_steps (got {} / {})",
                    self.min_steps, self.max_steps
                ),
            ));
        }
        if self.patience_epochs == 0 {
            return Err(config_err("finetune.patience_epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(config_err(
                "finetune.validation_fraction",
                "must lie in [0, 1)",
            ));
        }
        check_optimizer(
            "finetune",
            self.learning_rate,
            self.weight_decay,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.grad_clip_norm,
        )
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}
