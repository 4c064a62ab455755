use rand::Rng;

use crate::data::{disc_mask, overlay_taps, BatchSampler, Dataset, PerturbationSpec, Placement, PlacementRule};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchAttackConfig {
    /// Patch side `P`.
    pub side: usize,
    pub chi: f64,
    /// Radians.
    pub theta_max: f64,
    /// Placements drawn per sample and step.
    pub placements: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub target_class: Option<usize>,
    /// Weight of the fixed-class term.
    pub lambda: f64,
}

impl PatchAttackConfig {
    pub fn validate(&self) -> Result<()> {
        PlacementRule::new(self.chi, self.theta_max)?;
        if self.side == 0 || self.placements == 0 || self.batch_size == 0 {
            return Err(Error::invalid("patch side, placements and batch size must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be positive", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} must lie in [0, 1]", self.lambda)));
        }
        if self.target_class.is_none() && self.lambda != 0.0 {
            return Err(Error::invalid("lambda > 0 needs a target class"));
        }
        Ok(())
    }

    pub fn rule(&self) -> Result<PlacementRule> {
        PlacementRule::new(self.chi, self.theta_max)
    }
}

/// Value and patch gradient of the ascent objective for fixed placements.
#[derive(Clone, Debug)]
pub struct PatchObjective {
    /// `(1 - lambda) * CE(y) - lambda * CE(t)` averaged over placements.
    pub value: f64,
    pub gradient: Tensor,
}

/// Evaluates `J = (1 - lambda) * CE(f(x~), y) - lambda * CE(f(x~), t)` where
/// `x~` pastes `patch` into `images` `[B, C, H, W]`. `placements` holds `S`
/// placements per image, image-major (`placements.len() = B * S`).
pub fn patch_objective<C: Classifier + ?Sized>(
    target: &C,
    patch: &Tensor,
    images: &Tensor,
    labels: &[usize],
    placements: &[Placement],
    target_class: Option<usize>,
    lambda: f64,
) -> Result<PatchObjective> {
    let b = images.shape()[0];
    if placements.is_empty() || placements.len() % b != 0 {
        return Err(Error::invalid(format!(
            "{} placements for a batch of {b}",
            placements.len()
        )));
    }
    let s = placements.len() / b;
    let (h, w, p) = (images.shape()[2], images.shape()[3], patch.shape()[1]);
    let mut plan = Vec::with_capacity(placements.len());
    for pl in placements {
        plan.push(overlay_taps(h, w, p, pl)?);
    }
    let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(s)).collect();
    let repeated = images.select(&rows)?;
    let ys: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();

    let mut tape = Tape::new();
    let pv = tape.leaf(patch.clone(), true);
    let xv = tape.constant(repeated);
    let pasted = tape.overlay(xv, pv, plan)?;
    let mut terms = Vec::new();
    if lambda < 1.0 {
        terms.push((target.expected_loss_on_tape(&mut tape, pasted, &ys)?, 1.0 - lambda));
    }
    if lambda > 0.0 {
        let t = target_class.ok_or_else(|| Error::invalid("lambda > 0 needs a target class"))?;
        let ts = vec![t; ys.len()];
        terms.push((target.expected_loss_on_tape(&mut tape, pasted, &ts)?, -lambda));
    }
    let objective = tape.weighted_sum(&terms)?;
    let value = tape.value(objective).item()?;
    let mut grads = tape.backward(objective)?;
    Ok(PatchObjective {
        value,
        gradient: grads.take(pv).expect("patch gradient"),
    })
}

/// One gradient ascent step with `config.placements` fresh placements per
/// image. Only pixels inside the patch disc move; the result is clipped to
/// `[0, 1]`.
pub fn patch_step<C: Classifier + ?Sized, R: Rng + ?Sized>(
    patch: &Tensor,
    target: &C,
    images: &Tensor,
    labels: &[usize],
    config: &PatchAttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let rule = config.rule()?;
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let count = images.shape()[0] * config.placements;
    let placements: Vec<Placement> = (0..count).map(|_| rule.sample(h, w, rng)).collect();
    let obj = patch_objective(target, patch, images, labels, &placements, config.target_class, config.lambda)?;
    let p = patch.shape()[1];
    let mask = disc_mask(p);
    let mut out = patch.clone();
    let plane = p * p;
    for (i, (v, &g)) in out.data_mut().iter_mut().zip(obj.gradient.data()).enumerate() {
        if mask[i % plane] {
            *v = (*v + config.alpha * g).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Starts from a mid-gray patch and runs `config.iterations` patch steps.
pub fn learn_patch<C: Classifier + ?Sized, R: Rng + ?Sized>(
    target: &C,
    data: &Dataset,
    config: &PatchAttackConfig,
    rng: &mut R,
) -> Result<PerturbationSpec> {
    config.validate()?;
    if let Some(t) = config.target_class {
        if t >= data.classes() {
            return Err(Error::OutOfRange(format!("target class {t} with {} classes", data.classes())));
        }
    }
    let channels = data.image_shape()[0];
    let mut patch = Tensor::full(&[channels, config.side, config.side], 0.5);
    if config.iterations > 0 {
        let mut sampler = BatchSampler::new(data.len(), rng.gen())?;
        let size = config.batch_size.min(data.len());
        for _ in 0..config.iterations {
            let (batch, labels) = data.batch(&sampler.next_indices(size)?)?;
            patch = patch_step(&patch, target, &batch, &labels, config, rng)?;
        }
    }
    PerturbationSpec::patch(patch, config.rule()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Params, Tensor, Vec<usize>) {
        let model = build_model(&ModelConfig::tiny(3, 8, 4), 2).unwrap();
        let images = Tensor::from_fn(&[3, 3, 8, 8], |i| ((i * 37) % 101) as f64 / 100.0);
        (model, images, vec![0, 1, 2])
    }

    fn config(lambda: f64, target_class: Option<usize>) -> PatchAttackConfig {
        PatchAttackConfig {
            side: 8,
            chi: 0.5,
            theta_max: 0.3,
            placements: 2,
            alpha: 1.0,
            iterations: 1,
            batch_size: 3,
            target_class,
            lambda,
        }
    }

    #[test]
    fn pixels_outside_disc_never_change() {
        let (model, images, labels) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut patch = Tensor::full(&[3, 8, 8], 0.5);
        let cfg = PatchAttackConfig { alpha: 50.0, ..config(0.0, None) };
        for _ in 0..5 {
            patch = patch_step(&patch, &model, &images, &labels, &cfg, &mut rng).unwrap();
        }
        let mask = disc_mask(8);
        for (i, &v) in patch.data().iter().enumerate() {
            assert!((0.0..=1.0).contains(&v));
            if !mask[i % 64] {
                assert_eq!(v, 0.5);
            }
        }
        assert!(patch.data().iter().any(|&v| v != 0.5));
    }

    #[test]
    fn zero_gradient_leaves_patch() {
        let (mut model, images, labels) = setup();
        let names: Vec<String> = model
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(".weight"))
            .map(|e| e.name.clone())
            .collect();
        for n in names {
            let shape = model.get(&n).unwrap().shape().to_vec();
            model.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let patch = Tensor::from_fn(&[3, 8, 8], |i| (i % 10) as f64 / 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = patch_step(&patch, &model, &images, &labels, &config(0.0, None), &mut rng).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn targeted_step_raises_target_probability() {
        let (model, images, labels) = setup();
        let rule = PlacementRule::new(0.5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let placements: Vec<Placement> = (0..6).map(|_| rule.sample(8, 8, &mut rng)).collect();
        let patch = Tensor::full(&[3, 8, 8], 0.5);
        let before = patch_objective(&model, &patch, &images, &labels, &placements, Some(3), 1.0).unwrap();
        let mask = disc_mask(8);
        let mut improved = false;
        for alpha in [1.0, 0.1, 0.01] {
            let mut p = patch.clone();
            for (i, (v, &g)) in p.data_mut().iter_mut().zip(before.gradient.data()).enumerate() {
                if mask[i % 64] {
                    *v = (*v + alpha * g).clamp(0.0, 1.0);
                }
            }
            let after = patch_objective(&model, &p, &images, &labels, &placements, Some(3), 1.0).unwrap();
            improved |= after.value > before.value;
        }
        assert!(improved);
    }

    #[test]
    fn zero_iterations_is_gray() {
        let (model, images, labels) = setup();
        let data = Dataset::new(images, labels, 4, crate::data::Split::Train).unwrap();
        let cfg = PatchAttackConfig { iterations: 0, ..config(0.0, None) };
        let spec = learn_patch(&model, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(spec.xi().data().iter().all(|&v| v == 0.5));
        let bad = PatchAttackConfig { lambda: 0.5, ..cfg };
        assert!(bad.validate().is_err());
    }
}
