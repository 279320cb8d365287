//! Two-stage pipeline: a full-precision teacher, then a mixed-precision
//! student initialized from it and trained under gated self-distillation.

pub mod data;
mod harness;
mod loss;
mod model;
mod sgd;

pub use harness::{
    evaluate_model, train_student_ghost, train_student_with_plan, train_teacher, StepOutcome, StudentOutcome,
    StudentTrainer, TeacherOutcome,
};
pub use loss::{detection_loss, detection_loss_graph, LossParts};
pub use model::{decode, forward_graph, forward_weight, infer, DecodeSettings, ForwardOut, ModelParams, ParamVars};
pub use sgd::{sgd_step, Sgd, SgdSettings};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quant::{MAX_BITS, MIN_BITS};

/// Settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Bit-search threshold `T`.
    pub threshold: f64,
    pub b_min: u8,
    pub restarts: usize,
    /// Weight of the feature distillation term.
    pub beta: f64,
    pub tau: f64,
    pub d_embed: usize,
    pub exempt_first_layer: bool,
    /// Validate every this many epochs; the last epoch is always validated. `0` disables.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight_decay must be non-negative");
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.b_min) {
            return invalid(format!("b_min {} outside [{MIN_BITS}, {MAX_BITS}]", self.b_min));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return invalid("beta must be a non-negative number");
        }
        if !(self.tau > 0.0) || self.d_embed == 0 || self.restarts == 0 {
            return invalid("tau, d_embed and restarts must be positive");
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "L_F")]
    pub l_f: f64,
    #[serde(rename = "L_dec")]
    pub l_dec: f64,
    #[serde(rename = "val_mAP50")]
    pub val_map50: Option<f64>,
    /// Per scale: fraction of samples whose gate was on.
    pub alpha_hard: Vec<f64>,
    /// Per scale: mean soft gate value.
    pub alpha_soft: Vec<f64>,
}

/// Per-epoch gate statistics stored with a student checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTelemetry {
    pub epochs: Vec<GateEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateEpoch {
    pub epoch: usize,
    pub alpha_soft: Vec<f64>,
    pub alpha_hard: Vec<f64>,
}

/// History as JSON lines, one record per epoch.
pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
