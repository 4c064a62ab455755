use std::time::Instant;

use rand::Rng;

use super::step::{merge_duplicates, Optimizer, WeightedBatch};
use super::{stream, write_iteration_checkpoint, TrainConfig, TrainReport, TrainRow, STREAM_ATTACK, STREAM_SAMPLER};
use crate::attack::{pgd_per_sample, PgdConfig};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, Params};
use crate::tensor::Tensor;

/// Shared loop: `N` outer iterations of `K` steps, one checkpoint and one
/// metrics row per outer iteration. `make` turns a clean minibatch into the
/// weighted batches of the step.
fn run(
    data: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    mut make: impl FnMut(&Params, Tensor, Vec<usize>) -> Result<Vec<WeightedBatch>>,
) -> Result<(Params, TrainReport)> {
    config.validate()?;
    let mut params = build_model(model, config.seed)?;
    let mut opt = Optimizer::new(&params, config.momentum, config.weight_decay);
    let mut sampler_rng = stream(config.seed, STREAM_SAMPLER);
    let mut sampler = BatchSampler::new(data.len(), sampler_rng.gen())?;
    let batch = config.batch_size.min(data.len());
    let mut report = TrainReport::default();
    let mut step = 0;
    for n in 1..=config.outer_iterations {
        let wrap = |e: Error| Error::OuterIteration {
            iteration: n,
            source: Box::new(e),
        };
        let start = Instant::now();
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        let mut lr = config.schedule.lr_at(step);
        for _ in 0..config.inner_steps {
            lr = config.schedule.lr_at(step);
            let (images, labels) = data.batch(&sampler.next_indices(batch).map_err(wrap)?).map_err(wrap)?;
            let batches = merge_duplicates(make(&params, images, labels).map_err(wrap)?);
            let out = opt.step(&mut params, &batches, lr).map_err(wrap)?;
            loss_sum += out.loss;
            acc_sum += out.accuracy;
            if config.record_trajectory {
                report.trajectory.push(params.clone());
            }
            step += 1;
        }
        write_iteration_checkpoint(config.checkpoint_dir.as_deref(), n, &params, &mut report).map_err(wrap)?;
        let k = config.inner_steps.max(1) as f64;
        report.rows.push(TrainRow {
            iteration: n,
            loss: loss_sum / k,
            batch_accuracy: acc_sum / k,
            lr,
            pool_size: 0,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, report))
}

/// Plain minibatch SGD on the clean loss.
pub fn sgd_train(data: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<(Params, TrainReport)> {
    run(data, model, config, |_, images, labels| {
        Ok(vec![WeightedBatch {
            images,
            labels,
            weight: 1.0,
        }])
    })
}

/// Adversarial training: every step crafts per-sample PGD examples against
/// the current classifier and descends on half the clean loss plus half the
/// adversarial loss.
pub fn at_train(
    data: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    pgd: &PgdConfig,
) -> Result<(Params, TrainReport)> {
    pgd.validate()?;
    let mut attack_rng = stream(config.seed, STREAM_ATTACK);
    run(data, model, config, |params, images, labels| {
        let adv = pgd_per_sample(params, &images, &labels, pgd, &mut attack_rng)?;
        Ok(vec![
            WeightedBatch {
                images,
                labels: labels.clone(),
                weight: 0.5,
            },
            WeightedBatch {
                images: adv,
                labels,
                weight: 0.5,
            },
        ])
    })
}
