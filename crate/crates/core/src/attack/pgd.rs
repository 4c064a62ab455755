use rand::Rng;

use super::input_gradients;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_init: bool,
}

impl PgdConfig {
    /// Seven steps of `epsilon / 4` from a random start.
    pub fn standard(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            steps: 7,
            random_init: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite() && self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("PGD epsilon and step size must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-sample projected sign-gradient ascent inside the L∞ ball of radius
/// `epsilon` around each image, staying in `[0, 1]`.
pub fn pgd_per_sample<C: Classifier + ?Sized, R: Rng + ?Sized>(
    target: &C,
    batch: &Tensor,
    labels: &[usize],
    config: &PgdConfig,
    rng: &mut R,
) -> Result<Tensor> {
    config.validate()?;
    let eps = config.epsilon;
    let x = batch.data();
    let mut adv = batch.clone();
    if config.random_init && eps > 0.0 {
        for (v, &x0) in adv.data_mut().iter_mut().zip(x) {
            *v = (x0 + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
        }
    }
    for _ in 0..config.steps {
        let (grads, _) = input_gradients(target, adv.clone(), labels)?;
        for ((v, &g), &x0) in adv.data_mut().iter_mut().zip(grads.data()).zip(x) {
            let step = if g > 0.0 {
                config.step_size
            } else if g < 0.0 {
                -config.step_size
            } else {
                0.0
            };
            *v = (*v + step).clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}
