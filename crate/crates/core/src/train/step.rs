use crate::error::{Error, Result};
use crate::model::{argmax_lowest, forward_with, param_leaves, Mode, ParamKind, Params};
use crate::tensor::{sgd_momentum_step, Tape, Tensor};

/// One minibatch term of a weighted training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub weight: f64,
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Accuracy of the first batch under the pre-step parameters.
    pub accuracy: f64,
}

/// Merges batches with identical images and labels, adding their weights.
/// First appearances keep their order.
pub(crate) fn merge_duplicates(batches: Vec<WeightedBatch>) -> Vec<WeightedBatch> {
    let mut out: Vec<WeightedBatch> = Vec::with_capacity(batches.len());
    for b in batches {
        match out.iter_mut().find(|o| o.labels == b.labels && o.images == b.images) {
            Some(o) => o.weight += b.weight,
            None => out.push(b),
        }
    }
    out
}

/// SGD with momentum and weight decay over the trainable tensors of a model.
#[derive(Clone, Debug)]
pub struct Optimizer {
    velocities: Vec<Option<Tensor>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(params: &Params, momentum: f64, weight_decay: f64) -> Self {
        let velocities = params
            .entries()
            .iter()
            .map(|e| (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.tensor.shape())))
            .collect();
        Self {
            velocities,
            momentum,
            weight_decay,
        }
    }

    /// Descends on `Σ_b weight_b * CE(f(images_b), labels_b)` in one
    /// train-mode pass over the concatenated batches, so batch norm
    /// statistics cover every batch of the step and a shift common to one
    /// batch is not normalized away. A lone batch contributes its plain mean
    /// loss, whatever its weight. Running statistics are then updated once.
    pub fn step(&mut self, params: &mut Params, batches: &[WeightedBatch], lr: f64) -> Result<StepOutcome> {
        let first = batches.first().ok_or_else(|| Error::invalid("optimizer step without batches"))?;
        let mut tape = Tape::new();
        let leaves = param_leaves(params, &mut tape, true);
        let (images, labels, weights) = if batches.len() == 1 {
            (first.images.clone(), first.labels.clone(), None)
        } else {
            let parts: Vec<&Tensor> = batches.iter().map(|b| &b.images).collect();
            let mut labels = Vec::new();
            let mut weights = Vec::new();
            for b in batches {
                if b.labels.is_empty() {
                    return Err(Error::invalid("empty weighted batch"));
                }
                labels.extend_from_slice(&b.labels);
                let w = b.weight / b.labels.len() as f64;
                weights.extend(std::iter::repeat(w).take(b.labels.len()));
            }
            (Tensor::concat(&parts)?, labels, Some(weights))
        };
        let input = tape.constant(images);
        let (logits, stats) = forward_with(params, &leaves, &mut tape, input, Mode::Train)?;
        let accuracy = {
            let z = tape.value(logits);
            let k = z.shape()[1];
            let hits = z
                .data()
                .chunks_exact(k)
                .zip(&first.labels)
                .filter(|(row, &y)| argmax_lowest(row) == y)
                .count();
            hits as f64 / first.labels.len() as f64
        };
        let loss = match &weights {
            None => tape.softmax_cross_entropy(logits, &labels)?,
            Some(w) => tape.weighted_cross_entropy(logits, &labels, w)?,
        };
        let loss_value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        for ((entry, leaf), velocity) in params
            .entries_mut()
            .iter_mut()
            .zip(&leaves)
            .zip(self.velocities.iter_mut())
        {
            if let (Some(var), Some(v)) = (leaf, velocity) {
                let g = grads.take(*var).expect("trainable leaf gradient");
                sgd_momentum_step(&mut entry.tensor, &g, v, lr, self.momentum, self.weight_decay)?;
            }
        }
        params.update_running_stats(&stats)?;
        Ok(StepOutcome {
            loss: loss_value,
            accuracy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn merge_keeps_order_and_sums() {
        let a = Tensor::full(&[2, 1, 1, 1], 0.1);
        let b = Tensor::full(&[2, 1, 1, 1], 0.2);
        let wb = |images: &Tensor, weight| WeightedBatch {
            images: images.clone(),
            labels: vec![0, 1],
            weight,
        };
        let merged = merge_duplicates(vec![wb(&a, 0.5), wb(&b, 0.25), wb(&a, 0.25)]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].weight, 0.75);
        assert_eq!(merged[1].images, b);
    }

    #[test]
    fn zero_lr_leaves_trainable_params() {
        let mut p = build_model(&ModelConfig::tiny(1, 8, 2), 0).unwrap();
        let before = p.clone();
        let mut opt = Optimizer::new(&p, 0.9, 2e-4);
        let batch = WeightedBatch {
            images: Tensor::from_fn(&[4, 1, 8, 8], |i| (i % 9) as f64 / 9.0),
            labels: vec![0, 1, 0, 1],
            weight: 1.0,
        };
        opt.step(&mut p, &[batch], 0.0).unwrap();
        for (a, b) in p.entries().iter().zip(before.entries()) {
            if a.kind == ParamKind::Trainable {
                assert_eq!(a.tensor, b.tensor);
            }
        }
    }
}
