use rand::Rng;

use crate::data::{BatchSampler, Dataset, PerturbationSpec};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{Tape, Tensor};

/// Which classifier the conman attacks during fictitious play.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackTarget {
    /// The uniform mixture of past classifiers, when one is kept.
    Pool,
    /// The current classifier only.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniversalAttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub target: AttackTarget,
}

impl UniversalAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be positive", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("attack batch size must be positive"));
        }
        Ok(())
    }
}

/// Clamps every coordinate to `[-epsilon, epsilon]`.
pub fn project_linf(xi: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} must be positive")));
    }
    let mut out = xi.clone();
    for v in out.data_mut() {
        *v = v.clamp(-epsilon, epsilon);
    }
    Ok(out)
}

/// Gradient of the target's loss with respect to each input image, taken at
/// `clip(inputs)`. Clipping passes gradient on `[0, 1]` and blocks it
/// outside. Returns the gradient (same shape as `inputs`, each row scaled by
/// `1 / B` from the batch mean) and the mean loss.
pub fn input_gradients<C: Classifier + ?Sized>(
    target: &C,
    inputs: Tensor,
    labels: &[usize],
) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let z = tape.leaf(inputs, true);
    let x = tape.clip_unit(z)?;
    let loss = target.expected_loss_on_tape(&mut tape, x, labels)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    Ok((grads.take(z).expect("leaf gradient"), value))
}

/// `clip(xi + alpha * (Σ_i sgn(g_i)) / B, -epsilon, epsilon)` for per-sample
/// gradients `grads` `[B, ...]`.
pub fn sign_update(xi: &Tensor, grads: &Tensor, alpha: f64, epsilon: f64) -> Result<Tensor> {
    if grads.rank() < 2 || grads.shape()[1..] != *xi.shape() {
        return Err(Error::shape(format!(
            "gradients {:?} do not match perturbation {:?}",
            grads.shape(),
            xi.shape()
        )));
    }
    let b = grads.shape()[0];
    let mut signs = vec![0.0; xi.len()];
    for row in grads.data().chunks_exact(xi.len()) {
        for (s, &g) in signs.iter_mut().zip(row) {
            if g > 0.0 {
                *s += 1.0;
            } else if g < 0.0 {
                *s -= 1.0;
            }
        }
    }
    let mut out = xi.clone();
    for (v, s) in out.data_mut().iter_mut().zip(signs) {
        *v = (*v + alpha * (s / b as f64)).clamp(-epsilon, epsilon);
    }
    Ok(out)
}

/// One signed ascent step on the target's loss over `batch` `[B, C, H, W]`.
pub fn universal_step<C: Classifier + ?Sized>(
    xi: &Tensor,
    target: &C,
    batch: &Tensor,
    labels: &[usize],
    alpha: f64,
    epsilon: f64,
) -> Result<Tensor> {
    let norm = xi.max_abs();
    if norm > epsilon {
        return Err(Error::Budget(format!("|xi|_inf = {norm} exceeds {epsilon}")));
    }
    if batch.rank() != 4 || batch.shape()[1..] != *xi.shape() {
        return Err(Error::shape(format!(
            "batch {:?} does not match perturbation {:?}",
            batch.shape(),
            xi.shape()
        )));
    }
    let mut shifted = batch.clone();
    for chunk in shifted.data_mut().chunks_exact_mut(xi.len()) {
        for (v, &d) in chunk.iter_mut().zip(xi.data()) {
            *v += d;
        }
    }
    let (grads, _) = input_gradients(target, shifted, labels)?;
    sign_update(xi, &grads, alpha, epsilon)
}

/// Starts from zero and runs `config.iterations` universal steps on batches
/// drawn without replacement from `data`.
pub fn learn_universal<C, R>(
    target: &C,
    data: &Dataset,
    config: &UniversalAttackConfig,
    rng: &mut R,
) -> Result<PerturbationSpec>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let mut xi = Tensor::zeros(&data.image_shape());
    if config.iterations > 0 {
        let mut sampler = BatchSampler::new(data.len(), rng.gen())?;
        let size = config.batch_size.min(data.len());
        for _ in 0..config.iterations {
            let (batch, labels) = data.batch(&sampler.next_indices(size)?)?;
            xi = universal_step(&xi, target, &batch, &labels, config.alpha, config.epsilon)?;
        }
    }
    PerturbationSpec::universal(xi, config.epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let t = Tensor::new(vec![3], vec![0.5, -0.05, -0.7]).unwrap();
        let p = project_linf(&t, 0.2).unwrap();
        assert_eq!(p.data(), &[0.2, -0.05, -0.2]);
        assert_eq!(project_linf(&p, 0.2).unwrap(), p);
    }

    #[test]
    fn sign_arithmetic() {
        let xi = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![1, 3], vec![-3.0, 0.0, 7.0]).unwrap();
        let out = sign_update(&xi, &g, 0.1, 1.0).unwrap();
        assert_eq!(out.data(), &[-0.1, 0.0, 0.1]);
        let opposite = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 2.0, -3.0]).unwrap();
        let out = sign_update(&xi, &opposite, 0.1, 1.0).unwrap();
        assert_eq!(out.data(), &[0.0, 0.1, 0.0]);
        let zero = Tensor::zeros(&[4, 3]);
        assert_eq!(sign_update(&out, &zero, 0.1, 1.0).unwrap(), out);
    }

    #[test]
    fn duplicated_sample_same_update() {
        let xi = Tensor::new(vec![2], vec![0.05, -0.02]).unwrap();
        let one = Tensor::new(vec![1, 2], vec![0.3, -2.0]).unwrap();
        let two = Tensor::new(vec![2, 2], vec![0.3, -2.0, 0.3, -2.0]).unwrap();
        assert_eq!(
            sign_update(&xi, &one, 0.01, 0.06).unwrap(),
            sign_update(&xi, &two, 0.01, 0.06).unwrap()
        );
    }
}
