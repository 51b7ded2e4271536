//! Training: triplet sampling, the combined-objective step, AdamW,
//! checkpoints and the epoch loop.

mod batch;
mod checkpoint;
mod optim;
mod step;
mod trainer;

pub use batch::{sample_triplets, TrainingPool, TripletBatch};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamState, AdamW};
pub use step::{batch_loss, train_step, StepContext};
pub use trainer::{StepLog, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMode {
    /// Text-queried cross-attention on both sides of every pair.
    Full,
    /// Sketch↔image cross-attention only; descriptions are never read.
    NoText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Triplets per step (T).
    pub batch_triplets: usize,
    /// One epoch is `ceil(training sketches / T)` steps.
    pub epochs: usize,
    pub seed: u64,
    /// Steps between seen-test evaluations; 0 disables them.
    pub eval_every: u64,
    pub text_mode: TextMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_triplets == 0 || self.epochs == 0 {
            return fail("batch_triplets and epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} is negative", self.weight_decay));
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{what} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Seed for one purpose at one step, independent of how many steps ran
/// before in this process (resume reproduces it from the step alone).
pub(crate) fn step_seed(seed: u64, step: u64, purpose: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn rejects_bad_values() {
        let base = RunConfig::desk().train;
        assert!(base.validate().is_ok());
        for f in [
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.batch_triplets = 0,
            |c: &mut TrainConfig| c.beta2 = 1.0,
            |c: &mut TrainConfig| c.weight_decay = -1.0,
        ] {
            let mut c = base.clone();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(7, 0, 0), step_seed(7, 1, 0));
        assert_ne!(step_seed(7, 0, 0), step_seed(7, 0, 1));
        assert_eq!(step_seed(7, 3, 1), step_seed(7, 3, 1));
    }
}
