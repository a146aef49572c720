//! Loss functions, Adam, learning-rate and early-stopping schedules, and the
//! epoch loop.

mod adam;
mod loss;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

pub use adam::{AdamState, BETA1, BETA2, EPS as ADAM_EPS};
pub use loss::{binary_cross_entropy_loss, cross_entropy_loss, LossKind};
pub use schedule::{EarlyStopping, PlateauScheduler, StopSignal};
pub use trainer::{train_loop, train_model, write_log, EpochRecord, TrainOutcome};

use crate::error::{Error, Result};
use crate::eval::TieMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_factor: f64,
    /// Epochs of non-improving training loss before a decay.
    pub plateau_patience: usize,
    /// Validation rounds without a better MRR before stopping.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub label_smoothing: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub eval_every: usize,
    pub ties: TieMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            plateau_factor: 0.8,
            plateau_patience: 5,
            early_stop_patience: 10,
            max_epochs: 1000,
            batch_size: 512,
            l2: 0.0,
            label_smoothing: 0.0,
            loss: LossKind::SoftmaxCe,
            seed: 0,
            eval_every: 1,
            ties: TieMode::Average,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr={} must be finite and non-negative", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau_factor={} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (batch norm needs two rows)".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if !(self.l2 >= 0.0) {
            return fail(format!("l2={} must be non-negative", self.l2));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing={} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }
}
