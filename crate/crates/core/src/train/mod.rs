//! Training loops: fictitious play (approximate and exact), adversarial
//! training with PGD, plain SGD, and fictitious play on matrix games.

mod baselines;
mod fp;
mod matrix;
mod step;

pub use baselines::{at_train, sgd_train};
pub use fp::{classifier_pool_loss, fp_train, ConmanAttack, FpConfig, FpMode, FpOutcome, FpState};
pub use matrix::{fp_matrix_game, MatrixGame, MatrixGameResult};
pub use step::{Optimizer, StepOutcome, WeightedBatch};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Params};

/// Piecewise-constant learning rate: `initial * decay^m` where `m` counts the
/// milestones already reached.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    /// Global step indices, strictly increasing.
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay: 1.0,
            milestones: Vec::new(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.initial * self.decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.initial.is_finite() && self.decay.is_finite()) {
            return Err(Error::invalid("learning rate and decay must be finite, lr >= 0"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("milestones must be strictly increasing"));
        }
        Ok(())
    }
}

/// Shared optimization settings. `N * K` steps in total.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Directory receiving one checkpoint per outer iteration.
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep a copy of the parameters after every optimizer step in the report.
    pub record_trajectory: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iterations == 0 {
            return Err(Error::invalid("need at least one outer iteration"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch norm needs batches of at least 2"));
        }
        self.schedule.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.outer_iterations * self.inner_steps
    }
}

/// Per-outer-iteration metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub iteration: usize,
    /// Mean training objective over the iteration's steps (0 when K = 0).
    pub loss: f64,
    /// Mean accuracy on the clean minibatches.
    pub batch_accuracy: f64,
    /// Learning rate of the last step.
    pub lr: f64,
    pub pool_size: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    /// Parameters after every step, when requested.
    pub trajectory: Vec<Params>,
    pub checkpoints: Vec<PathBuf>,
}

/// How the classifier weighs the pooled datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Literal,
    Uniform,
}

/// Literal-mode weights expand the nested averages
/// `(1/(n+1)) Σ_{i=0..n} L^i` with `L^0 = L(D_0)` and `L^i` the mean loss of
/// `D_0..D_{i-1}`; uniform mode gives every dataset the same weight. Returns
/// one weight per dataset `D_0..D_{n-1}` (a single weight when `n = 0`).
pub fn dataset_weights(n: usize, mode: Weighting) -> Vec<f64> {
    let count = n.max(1);
    match mode {
        Weighting::Uniform => vec![1.0 / count as f64; count],
        Weighting::Literal => {
            if n <= 1 {
                return vec![1.0];
            }
            let scale = 1.0 / (n + 1) as f64;
            let mut w = vec![0.0; n];
            // acc = Σ_{i=j+1..n} 1/i, accumulated from the largest i.
            let mut acc = 0.0;
            for j in (0..n).rev() {
                acc += 1.0 / (j + 1) as f64;
                let head = if j == 0 { 1.0 } else { 0.0 };
                w[j] = scale * (head + acc);
            }
            w
        }
    }
}

/// Independent random streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) const STREAM_SAMPLER: u64 = 1;
pub(crate) const STREAM_ATTACK: u64 = 2;
pub(crate) const STREAM_VIEWS: u64 = 3;

pub(crate) fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter_{iteration:04}.ckpt"))
}

pub(crate) fn write_iteration_checkpoint(
    dir: Option<&Path>,
    iteration: usize,
    params: &Params,
    report: &mut TrainReport,
) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else {
        return Ok(None);
    };
    std::fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir, iteration);
    save_checkpoint(&path, params)?;
    report.checkpoints.push(path.clone());
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_small_n() {
        assert_eq!(dataset_weights(0, Weighting::Literal), vec![1.0]);
        assert_eq!(dataset_weights(1, Weighting::Literal), vec![1.0]);
        let w = dataset_weights(2, Weighting::Literal);
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-15 && (w[1] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(dataset_weights(4, Weighting::Uniform), vec![0.25; 4]);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule {
            initial: 0.01,
            decay: 0.1,
            milestones: vec![10, 20],
        };
        assert_eq!(s.lr_at(9), 0.01);
        assert_eq!(s.lr_at(10), 0.01 * 0.1);
        assert!((s.lr_at(25) - 1e-4).abs() < 1e-18);
        let bad = LrSchedule {
            milestones: vec![5, 5],
            ..s
        };
        assert!(bad.validate().is_err());
    }
}
