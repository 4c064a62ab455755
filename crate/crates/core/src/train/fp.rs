use std::time::Instant;

use rand::Rng;

use super::step::{merge_duplicates, Optimizer, WeightedBatch};
use super::{
    dataset_weights, stream, write_iteration_checkpoint, TrainConfig, TrainReport, TrainRow, Weighting,
    STREAM_ATTACK, STREAM_SAMPLER, STREAM_VIEWS,
};
use crate::attack::{learn_patch, learn_universal, AttackTarget, PatchAttackConfig, UniversalAttackConfig};
use crate::data::{BatchSampler, Dataset, PerturbationSpec, PerturbedView};
use crate::error::{Error, Result};
use crate::model::{build_model, ClassifierPool, ClassifierSnapshot, ModelConfig, Params};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpMode {
    /// One classifier trained on the weighted pool of datasets.
    Approximate,
    /// Also keeps every past classifier; the conman attacks their mixture.
    Exact,
}

/// The conman's best response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConmanAttack {
    Universal(UniversalAttackConfig),
    Patch(PatchAttackConfig),
}

impl ConmanAttack {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConmanAttack::Universal(c) => c.validate(),
            ConmanAttack::Patch(c) => c.validate(),
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            ConmanAttack::Universal(c) => c.iterations,
            ConmanAttack::Patch(c) => c.iterations,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ConmanAttack::Universal(_) => "universal",
            ConmanAttack::Patch(_) => "patch",
        }
    }

    /// Crafts a fresh perturbation against `target` on `data`.
    pub fn craft<C, R>(&self, target: &C, data: &Dataset, rng: &mut R) -> Result<PerturbationSpec>
    where
        C: crate::model::Classifier + ?Sized,
        R: Rng + ?Sized,
    {
        match self {
            ConmanAttack::Universal(c) => learn_universal(target, data, c, rng),
            ConmanAttack::Patch(c) => learn_patch(target, data, c, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpConfig {
    pub train: TrainConfig,
    pub attack: ConmanAttack,
    pub mode: FpMode,
    pub weighting: Weighting,
}

/// Both players' histories during fictitious play.
#[derive(Clone, Debug)]
pub struct FpState {
    pub params: Params,
    /// `xi_1..xi_n`; the clean dataset `D_0` is implicit.
    pub perturbations: Vec<PerturbationSpec>,
    /// Past classifiers, exact mode only.
    pub classifiers: Option<ClassifierPool>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub weighting: Weighting,
}

impl FpState {
    pub fn new(params: Params, weighting: Weighting, mode: FpMode) -> Self {
        Self {
            params,
            perturbations: Vec::new(),
            classifiers: (mode == FpMode::Exact).then(ClassifierPool::new),
            iteration: 0,
            weighting,
        }
    }

    /// Weights of `D_0` and every pooled dataset.
    pub fn weights(&self) -> Vec<f64> {
        dataset_weights(self.perturbations.len() + 1, self.weighting)
    }

    /// The selected examples under `D_0` and every pooled perturbation,
    /// weighted, with zero-weight datasets skipped. `view_seeds[i]` seeds the
    /// placements of pooled perturbation `i`.
    pub fn weighted_batches(&self, data: &Dataset, indices: &[usize], view_seeds: &[u64]) -> Result<Vec<WeightedBatch>> {
        if view_seeds.len() != self.perturbations.len() {
            return Err(Error::invalid("one view seed per pooled perturbation"));
        }
        let weights = self.weights();
        let mut out = Vec::with_capacity(weights.len());
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (images, labels) = if i == 0 {
                data.batch(indices)?
            } else {
                PerturbedView::new(data, self.perturbations[i - 1].clone(), view_seeds[i - 1])?.materialize(indices)?
            };
            out.push(WeightedBatch { images, labels, weight: w });
        }
        Ok(out)
    }
}

/// `Σ_i w_i * CE(f, D_i restricted to indices)` with the network in
/// inference mode.
pub fn classifier_pool_loss(
    params: &Params,
    state: &FpState,
    data: &Dataset,
    indices: &[usize],
    view_seeds: &[u64],
) -> Result<f64> {
    let mut total = 0.0;
    for b in state.weighted_batches(data, indices, view_seeds)? {
        let mut tape = Tape::new();
        let input = tape.constant(b.images);
        let pass = crate::model::forward(params, &mut tape, input, crate::model::Mode::Infer, false)?;
        let ce = tape.softmax_cross_entropy(pass.logits, &b.labels)?;
        total += b.weight * tape.value(ce).item()?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct FpOutcome {
    pub params: Params,
    pub perturbations: Vec<PerturbationSpec>,
    pub classifiers: Option<ClassifierPool>,
    pub report: TrainReport,
}

/// Fictitious play. Outer iteration `n = 1..N` runs `K` optimizer steps on
/// the weighted loss over `D_0..D_{n-1}` (one index batch per step, seen
/// through every pooled perturbation), checkpoints the classifier, then
/// crafts `xi_n` against the current classifier (approximate mode) or the
/// pool of past classifiers (exact mode) and pools it.
pub fn fp_train(data: &Dataset, model: &ModelConfig, config: &FpConfig) -> Result<FpOutcome> {
    let tc = &config.train;
    tc.validate()?;
    config.attack.validate()?;
    let params = build_model(model, tc.seed)?;
    let mut state = FpState::new(params, config.weighting, config.mode);
    let mut opt = Optimizer::new(&state.params, tc.momentum, tc.weight_decay);
    let mut sampler_rng = stream(tc.seed, STREAM_SAMPLER);
    let mut sampler = BatchSampler::new(data.len(), sampler_rng.gen())?;
    let mut attack_rng = stream(tc.seed, STREAM_ATTACK);
    let mut view_rng = stream(tc.seed, STREAM_VIEWS);
    let batch = tc.batch_size.min(data.len());
    let mut report = TrainReport::default();
    let mut step = 0;
    for n in 1..=tc.outer_iterations {
        let wrap = |e: Error| Error::OuterIteration {
            iteration: n,
            source: Box::new(e),
        };
        let start = Instant::now();
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        let mut lr = tc.schedule.lr_at(step);
        for _ in 0..tc.inner_steps {
            lr = tc.schedule.lr_at(step);
            let idx = sampler.next_indices(batch).map_err(wrap)?;
            let seeds: Vec<u64> = state.perturbations.iter().map(|_| view_rng.gen()).collect();
            let batches = merge_duplicates(state.weighted_batches(data, &idx, &seeds).map_err(wrap)?);
            let out = opt.step(&mut state.params, &batches, lr).map_err(wrap)?;
            loss_sum += out.loss;
            acc_sum += out.accuracy;
            if tc.record_trajectory {
                report.trajectory.push(state.params.clone());
            }
            step += 1;
        }
        let ckpt = write_iteration_checkpoint(tc.checkpoint_dir.as_deref(), n, &state.params, &mut report).map_err(wrap)?;
        if let Some(pool) = state.classifiers.as_mut() {
            let snap = match ckpt {
                Some(path) => ClassifierSnapshot::on_disk(n, path, format!("iteration {n}")),
                None => ClassifierSnapshot::in_memory(n, &state.params, format!("iteration {n}")),
            };
            pool.push(snap).map_err(wrap)?;
        }
        let attack_pool = match (&state.classifiers, config.attack) {
            (Some(pool), ConmanAttack::Universal(c)) if c.target == AttackTarget::Pool => Some(pool),
            (Some(pool), ConmanAttack::Patch(_)) => Some(pool),
            _ => None,
        };
        let xi = match attack_pool {
            Some(pool) => config.attack.craft(pool, data, &mut attack_rng),
            None => config.attack.craft(&state.params, data, &mut attack_rng),
        }
        .map_err(wrap)?;
        state.perturbations.push(xi);
        state.iteration = n;
        let k = tc.inner_steps.max(1) as f64;
        report.rows.push(TrainRow {
            iteration: n,
            loss: loss_sum / k,
            batch_accuracy: acc_sum / k,
            lr,
            pool_size: state.perturbations.len(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(FpOutcome {
        params: state.params,
        perturbations: state.perturbations,
        classifiers: state.classifiers,
        report,
    })
}
