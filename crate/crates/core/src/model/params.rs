use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActShape, Layer, Mode, ModelConfig, BN_MOMENTUM, BN_STABILIZER};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running mean or variance.
    RunningStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Every named tensor of a network, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
}

fn entry(name: String, kind: ParamKind, tensor: Tensor) -> ParamEntry {
    ParamEntry { name, kind, tensor }
}

impl Params {
    /// Parameter layout for `config` with placeholder values (zeros, unit
    /// gamma and running variance).
    pub fn template(config: &ModelConfig) -> Result<Self> {
        let shapes = config.validate()?;
        let mut entries = Vec::new();
        let mut prev = ActShape::Image {
            c: config.input[0],
            h: config.input[1],
            w: config.input[2],
        };
        for (i, (layer, &shape)) in config.layers.iter().zip(&shapes).enumerate() {
            match *layer {
                Layer::Conv {
                    filters, kernel, ..
                } => {
                    let ActShape::Image { c, .. } = prev else {
                        unreachable!("validated")
                    };
                    entries.push(entry(
                        format!("conv{i}.weight"),
                        ParamKind::Trainable,
                        Tensor::zeros(&[filters, c, kernel, kernel]),
                    ));
                    entries.push(entry(
                        format!("conv{i}.bias"),
                        ParamKind::Trainable,
                        Tensor::zeros(&[filters]),
                    ));
                }
                Layer::BatchNorm => {
                    let ActShape::Image { c, .. } = prev else {
                        unreachable!("validated")
                    };
                    entries.push(entry(format!("bn{i}.gamma"), ParamKind::Trainable, Tensor::full(&[c], 1.0)));
                    entries.push(entry(format!("bn{i}.beta"), ParamKind::Trainable, Tensor::zeros(&[c])));
                    entries.push(entry(
                        format!("bn{i}.running_mean"),
                        ParamKind::RunningStat,
                        Tensor::zeros(&[c]),
                    ));
                    entries.push(entry(
                        format!("bn{i}.running_var"),
                        ParamKind::RunningStat,
                        Tensor::full(&[c], 1.0),
                    ));
                }
                Layer::Relu => {}
                Layer::Dense { outputs } => {
                    let fan_in = match prev {
                        ActShape::Image { c, h, w } => c * h * w,
                        ActShape::Flat(n) => n,
                    };
                    entries.push(entry(
                        format!("dense{i}.weight"),
                        ParamKind::Trainable,
                        Tensor::zeros(&[fan_in, outputs]),
                    ));
                    entries.push(entry(
                        format!("dense{i}.bias"),
                        ParamKind::Trainable,
                        Tensor::zeros(&[outputs]),
                    ));
                }
            }
            prev = shape;
        }
        Ok(Self {
            config: config.clone(),
            entries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::ModelConfig(format!("missing parameter `{name}`")))
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        if self.entries[i].tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.entries[i].tensor.shape(),
                tensor.shape()
            )));
        }
        tensor.check_finite()?;
        self.entries[i].tensor = tensor;
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Folds train-mode batch statistics into the running statistics:
    /// `r <- momentum * r + (1 - momentum) * batch`, with the unbiased batch
    /// variance.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            let mi = self.index_of(&format!("bn{layer}.running_mean"))?;
            let vi = self.index_of(&format!("bn{layer}.running_var"))?;
            let correction = s.count as f64 / (s.count as f64 - 1.0);
            for (r, &m) in self.entries[mi].tensor.data_mut().iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, &v) in self.entries[vi].tensor.data_mut().iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * correction;
            }
        }
        Ok(())
    }

    /// Inference-mode logits for a batch, computed in chunks.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = batch.shape()[0];
        let mut data = Vec::with_capacity(n * self.config.classes);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let input = tape.constant(batch.select(&idx)?);
            let pass = forward(self, &mut tape, input, Mode::Infer, false)?;
            data.extend_from_slice(tape.value(pass.logits).data());
            start = end;
        }
        Tensor::new(vec![n, self.config.classes], data)
    }
}

/// Draws weights and biases from `U(-b, b)` with `b = sqrt(1 / fan_in)`
/// (`fan_in = C * k * k` for convolutions); batch norm starts at
/// `gamma = 1`, `beta = 0`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Params> {
    let mut params = Params::template(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Weights precede their bias, so the bias reuses the weight's bound.
    let mut bound = 0.0;
    for e in params.entries.iter_mut() {
        if e.name.ends_with(".weight") {
            let s = e.tensor.shape();
            let fan_in: usize = if s.len() == 4 { s[1..].iter().product() } else { s[0] };
            bound = (1.0 / fan_in as f64).sqrt();
        } else if !e.name.ends_with(".bias") {
            continue;
        }
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in e.tensor.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Result of recording a network on a tape.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Tape handle of each trainable entry (same order as
    /// [`Params::entries`]; `None` for running statistics).
    pub param_vars: Vec<Option<Var>>,
    /// Batch statistics of every batch-norm layer, train mode only.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// Records the network on `tape`. With `trainable`, the trainable tensors
/// become gradient-requiring leaves.
pub fn forward(
    params: &Params,
    tape: &mut Tape,
    input: Var,
    mode: Mode,
    trainable: bool,
) -> Result<ForwardPass> {
    let param_vars = param_leaves(params, tape, trainable);
    let (logits, batch_stats) = forward_with(params, &param_vars, tape, input, mode)?;
    Ok(ForwardPass {
        logits,
        param_vars,
        batch_stats,
    })
}

/// Records every trainable tensor as a leaf (same order as
/// [`Params::entries`]; `None` for running statistics).
pub fn param_leaves(params: &Params, tape: &mut Tape, trainable: bool) -> Vec<Option<Var>> {
    params
        .entries
        .iter()
        .map(|e| (e.kind == ParamKind::Trainable).then(|| tape.leaf(e.tensor.clone(), trainable)))
        .collect()
}

/// Records the network on `tape` using leaves from [`param_leaves`], so that
/// several inputs can share one set of parameter nodes. Returns the logits
/// and, in train mode, the batch statistics of every batch-norm layer.
pub fn forward_with(
    params: &Params,
    param_vars: &[Option<Var>],
    tape: &mut Tape,
    input: Var,
    mode: Mode,
) -> Result<(Var, Vec<(usize, BatchStats)>)> {
    let config = &params.config;
    let in_shape = tape.value(input).shape().to_vec();
    if in_shape.len() != 4 || in_shape[1..] != config.input {
        return Err(Error::shape(format!(
            "model expects [B, {}, {}, {}] input, got {in_shape:?}",
            config.input[0], config.input[1], config.input[2]
        )));
    }
    if param_vars.len() != params.entries.len() {
        return Err(Error::invalid("parameter leaves do not match the model"));
    }
    let batch = in_shape[0];
    let var_of = |name: &str| -> Result<Var> {
        let i = params.index_of(name)?;
        param_vars[i].ok_or_else(|| Error::invalid(format!("`{name}` has no leaf")))
    };
    let mut batch_stats = Vec::new();
    let mut x = input;
    for (i, layer) in config.layers.iter().enumerate() {
        x = match *layer {
            Layer::Conv {
                stride, padding, ..
            } => {
                let w = var_of(&format!("conv{i}.weight"))?;
                let b = var_of(&format!("conv{i}.bias"))?;
                tape.conv2d(x, w, b, stride, padding)?
            }
            Layer::BatchNorm => {
                let g = var_of(&format!("bn{i}.gamma"))?;
                let b = var_of(&format!("bn{i}.beta"))?;
                match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm_train(x, g, b, BN_STABILIZER)?;
                        batch_stats.push((i, stats));
                        y
                    }
                    Mode::Infer => {
                        let mean = params.entries[params.index_of(&format!("bn{i}.running_mean"))?]
                            .tensor
                            .data();
                        let var = params.entries[params.index_of(&format!("bn{i}.running_var"))?]
                            .tensor
                            .data();
                        tape.batch_norm_infer(x, g, b, mean, var, BN_STABILIZER)?
                    }
                }
            }
            Layer::Relu => tape.relu(x)?,
            Layer::Dense { .. } => {
                let shape = tape.value(x).shape().to_vec();
                if shape.len() != 2 {
                    let flat: usize = shape[1..].iter().product();
                    x = tape.reshape(x, &[batch, flat])?;
                }
                let w = var_of(&format!("dense{i}.weight"))?;
                let b = var_of(&format!("dense{i}.bias"))?;
                tape.dense(x, w, b)?
            }
        };
    }
    Ok((x, batch_stats))
}
