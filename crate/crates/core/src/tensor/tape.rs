use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding rule for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on every side.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// One overlaid output pixel: the flat offset inside an `H x W` plane and the
/// four bilinear taps (flat offset inside the `P x P` patch plane, weight).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayTap {
    pub pixel: usize,
    pub taps: [(usize, f64); 4],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Reshape(Var),
    AddBroadcast {
        batch: Var,
        item: Var,
    },
    ClipUnit(Var),
    Relu(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics take part in the backward pass (train mode).
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        /// Per-row weights; `None` means the mean.
        weights: Option<Vec<f64>>,
    },
    Overlay {
        images: Var,
        patch: Var,
        plan: Vec<Vec<OverlayTap>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics of a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves that asked for
/// them, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Output positions `o` in `lo..hi` for which `o * stride + offset` lies in
/// `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite()?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are produced only for leaves created with
    /// `requires_grad` and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * factor).collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `Σ weight · term` over scalar terms, accumulated in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::invalid("weighted_sum of no terms"));
        }
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.value(v).item()?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Adds `item` (shape of one batch element) to every element of `batch`.
    pub fn add_broadcast(&mut self, batch: Var, item: Var) -> Result<Var> {
        let (x, y) = (self.value(batch), self.value(item));
        if x.rank() < 2 || &x.shape()[1..] != y.shape() {
            return Err(Error::shape(format!(
                "add_broadcast: batch {:?} vs item {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let n = y.len();
        let data = x
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(y.data()).map(|(p, q)| p + q))
            .collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::AddBroadcast { batch, item }, &[batch, item])
    }

    /// Clamps to `[0, 1]`. The gradient passes where the input lies inside
    /// the closed interval and is zero where it was clamped.
    pub fn clip_unit(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p.clamp(0.0, 1.0)).collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::ClipUnit(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&p| if p > 0.0 { p } else { 0.0 })
            .collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::Relu(a), &[a])
    }

    /// `out[b, o] = Σ_i input[b, i] · weight[i, o] + bias[o]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::shape(format!(
                "dense ranks: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
        let fan_out = w.shape()[1];
        if w.shape()[0] != fan_in || b.shape()[0] != fan_out {
            return Err(Error::shape(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; batch * fan_out];
        for (row, xrow) in out.chunks_mut(fan_out).zip(xd.chunks(fan_in)) {
            for (i, &xi) in xrow.iter().enumerate() {
                let wrow = &wd[i * fan_out..(i + 1) * fan_out];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += xi * wv;
                }
            }
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts_unchecked(vec![batch, fan_out], out);
        self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    /// 2-D cross-correlation of `[B, C, H, W]` input with `[F, C, k, k]`
    /// kernels. Each output value starts at its bias and accumulates
    /// `kernel · input` in `(channel, row, column)` kernel order.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        if stride < 1 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (x, w, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
            return Err(Error::shape(format!(
                "conv2d ranks: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let [batch, chans, h, wid] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [filters, kc, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        if kc != chans || kh != kw || b.shape()[0] != filters {
            return Err(Error::shape(format!(
                "conv2d: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let k = kh;
        let pad = padding.amount(k);
        if k > h + 2 * pad || k > wid + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} larger than padded input {h}x{wid}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wid + 2 * pad - k) / stride + 1;
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; batch * filters * oh * ow];
        for bi in 0..batch {
            for f in 0..filters {
                let plane = &mut out[(bi * filters + f) * oh * ow..][..oh * ow];
                plane.fill(bd[f]);
                for c in 0..chans {
                    let xplane = &xd[(bi * chans + c) * h * wid..][..h * wid];
                    for ky in 0..k {
                        let (oy0, oy1) =
                            valid_range(oh, h, stride, ky as isize - pad as isize);
                        for kx in 0..k {
                            let wv = wd[((f * chans + c) * k + ky) * k + kx];
                            let (ox0, ox1) =
                                valid_range(ow, wid, stride, kx as isize - pad as isize);
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let xrow = &xplane[iy * wid..(iy + 1) * wid];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    let ix0 = ox0 + kx - pad;
                                    for (o, &xv) in orow[ox0..ox1]
                                        .iter_mut()
                                        .zip(&xrow[ix0..ix0 + (ox1 - ox0)])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        orow[ox] += wv * xrow[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![batch, filters, oh, ow], out);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            &[input, kernel, bias],
        )
    }

    /// Train-mode batch normalization over `[B, C, H, W]` with per-channel
    /// batch statistics. Returns the output and the statistics used.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stabilizer: f64,
    ) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let (chans, plane) = self.bn_dims(input, gamma, beta)?;
        let batch = x.shape()[0];
        if batch < 2 {
            return Err(Error::invalid(format!(
                "train-mode batch norm needs at least 2 samples, got {batch}"
            )));
        }
        let count = batch * plane;
        let xd = x.data();
        let mut mean = vec![0.0; chans];
        let mut var = vec![0.0; chans];
        for c in 0..chans {
            let mut s = 0.0;
            for b in 0..batch {
                s += xd[(b * chans + c) * plane..][..plane].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for b in 0..batch {
                for &p in &xd[(b * chans + c) * plane..][..plane] {
                    v += (p - m) * (p - m);
                }
            }
            mean[c] = m;
            var[c] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stabilizer).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std, chans, plane);
        let stats = BatchStats { mean, var, count };
        let value = Tensor::from_parts_unchecked(self.value(input).shape().to_vec(), out);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        stabilizer: f64,
    ) -> Result<Var> {
        let (chans, plane) = self.bn_dims(input, gamma, beta)?;
        if running_mean.len() != chans || running_var.len() != chans {
            return Err(Error::shape("batch norm running statistics length"));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + stabilizer).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, running_mean, &inv_std, chans, plane);
        let value = Tensor::from_parts_unchecked(self.value(input).shape().to_vec(), out);
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[input, gamma, beta],
        )
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::shape(format!(
                "batch norm expects [B, C, H, W], got {:?}",
                x.shape()
            )));
        }
        let chans = x.shape()[1];
        if self.value(gamma).shape() != [chans] || self.value(beta).shape() != [chans] {
            return Err(Error::shape("batch norm gamma/beta must have one value per channel"));
        }
        Ok((chans, x.shape()[2] * x.shape()[3]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        chans: usize,
        plane: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let xd = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, ((o, h), &p)) in out.iter_mut().zip(xhat.iter_mut()).zip(xd).enumerate() {
            let c = (i / plane) % chans;
            *h = (p - mean[c]) * inv_std[c];
            *o = g[c] * *h + bt[c];
        }
        (out, xhat)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, labels, None)
    }

    /// `Σ_s weights[s] * CE(logits_s, labels_s)`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        if weights.len() != labels.len() {
            return Err(Error::shape(format!(
                "weighted_cross_entropy: {} weights for {} labels",
                weights.len(),
                labels.len()
            )));
        }
        self.cross_entropy(logits, labels, Some(weights.to_vec()))
    }

    fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<Vec<f64>>) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: logits {:?} with {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let classes = z.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::OutOfRange(format!(
                "label {bad} with {classes} classes"
            )));
        }
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for (i, ((row, prow), &label)) in z.data().chunks(classes).zip(probs.chunks_mut(classes)).zip(labels).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                s += *p;
            }
            for p in prow.iter_mut() {
                *p /= s;
            }
            let ce = m + s.ln() - row[label];
            total += match &weights {
                Some(w) => w[i] * ce,
                None => ce,
            };
        }
        let loss = match weights {
            Some(_) => total,
            None => total / labels.len() as f64,
        };
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weights,
            },
            &[logits],
        )
    }

    /// Replaces selected pixels of every channel of `images` `[B, C, H, W]`
    /// by bilinear combinations of `patch` `[C, P, P]` entries. `plan[b]`
    /// lists the overlaid pixels of batch element `b`.
    pub fn overlay(&mut self, images: Var, patch: Var, plan: Vec<Vec<OverlayTap>>) -> Result<Var> {
        let (x, p) = (self.value(images), self.value(patch));
        if x.rank() != 4 || p.rank() != 3 || x.shape()[1] != p.shape()[0] {
            return Err(Error::shape(format!(
                "overlay: images {:?}, patch {:?}",
                x.shape(),
                p.shape()
            )));
        }
        if plan.len() != x.shape()[0] {
            return Err(Error::shape("overlay plan must have one entry per image"));
        }
        let chans = x.shape()[1];
        let plane = x.shape()[2] * x.shape()[3];
        let pplane = p.shape()[1] * p.shape()[2];
        let pd = p.data();
        let mut out = x.data().to_vec();
        for (b, taps) in plan.iter().enumerate() {
            for t in taps {
                if t.pixel >= plane || t.taps.iter().any(|&(i, _)| i >= pplane) {
                    return Err(Error::OutOfRange("overlay tap outside image or patch".into()));
                }
                for c in 0..chans {
                    let mut v = 0.0;
                    for &(i, w) in &t.taps {
                        v += w * pd[c * pplane + i];
                    }
                    out[(b * chans + c) * plane + t.pixel] = v;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        self.push(value, Op::Overlay { images, patch, plan }, &[images, patch])
    }

    /// Reverse pass from a one-element `loss`. Every node is visited once,
    /// last to first; gradients reaching a node from several consumers are
    /// summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op, node.requires_grad) {
                (Some(g), Op::Leaf, true) => {
                    Some(Tensor::from_parts_unchecked(node.value.shape().to_vec(), g))
                }
                (None, Op::Leaf, true) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|g| g * f).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        acc(v, vec![g[0] * w]);
                    }
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::AddBroadcast { batch, item } => {
                if self.wants(*batch) {
                    acc(*batch, g.to_vec());
                }
                if self.wants(*item) {
                    let n = self.value(*item).len();
                    let mut s = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, r) in s.iter_mut().zip(row) {
                            *s += r;
                        }
                    }
                    acc(*item, s);
                }
            }
            Op::ClipUnit(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if (0.0..=1.0).contains(&x) { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
                let (xd, wd) = (x.data(), w.data());
                if self.wants(*input) {
                    let mut gx = vec![0.0; xd.len()];
                    for (gxrow, grow) in gx.chunks_mut(fan_in).zip(g.chunks(fan_out)) {
                        for (i, gxi) in gxrow.iter_mut().enumerate() {
                            let wrow = &wd[i * fan_out..(i + 1) * fan_out];
                            *gxi = wrow.iter().zip(grow).map(|(w, g)| w * g).sum();
                        }
                    }
                    acc(*input, gx);
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; wd.len()];
                    for (xrow, grow) in xd.chunks(fan_in).zip(g.chunks(fan_out)) {
                        for (i, &xi) in xrow.iter().enumerate() {
                            for (gw, &gv) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(grow) {
                                *gw += xi * gv;
                            }
                        }
                    }
                    acc(*weight, gw);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; fan_out];
                    for grow in g.chunks(fan_out) {
                        for (b, &gv) in gb.iter_mut().zip(grow) {
                            *b += gv;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(*input, *kernel, *bias, *stride, *pad, &node.value, g, &mut acc),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*input).shape();
                let chans = shape[1];
                let plane = shape[2] * shape[3];
                let batch = shape[0];
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; chans];
                let mut sum_gx = vec![0.0; chans];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    let c = (i / plane) % chans;
                    sum_g[c] += gv;
                    sum_gx[c] += gv * h;
                }
                if self.wants(*input) {
                    let mut gx = vec![0.0; g.len()];
                    if *batch_stats {
                        let m = (batch * plane) as f64;
                        for (i, gxv) in gx.iter_mut().enumerate() {
                            let c = (i / plane) % chans;
                            // d xhat = g * gamma; sums of d xhat factor through gamma.
                            let dxh = g[i] * gam[c];
                            *gxv = inv_std[c] / m
                                * (m * dxh - gam[c] * sum_g[c] - xhat[i] * gam[c] * sum_gx[c]);
                        }
                    } else {
                        for (i, gxv) in gx.iter_mut().enumerate() {
                            let c = (i / plane) % chans;
                            *gxv = g[i] * gam[c] * inv_std[c];
                        }
                    }
                    acc(*input, gx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if self.wants(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                weights,
            } => {
                let classes = self.value(*logits).shape()[1];
                let mean_scale = g[0] / labels.len() as f64;
                let mut gz = probs.clone();
                for (i, (row, &l)) in gz.chunks_mut(classes).zip(labels).enumerate() {
                    let scale = weights.as_ref().map_or(mean_scale, |w| g[0] * w[i]);
                    row[l] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, gz);
            }
            Op::Overlay {
                images,
                patch,
                plan,
            } => {
                let shape = self.value(*images).shape();
                let chans = shape[1];
                let plane = shape[2] * shape[3];
                let pplane = self.value(*patch).len() / chans;
                if self.wants(*images) {
                    let mut gi = g.to_vec();
                    for (b, taps) in plan.iter().enumerate() {
                        for t in taps {
                            for c in 0..chans {
                                gi[(b * chans + c) * plane + t.pixel] = 0.0;
                            }
                        }
                    }
                    acc(*images, gi);
                }
                if self.wants(*patch) {
                    let mut gp = vec![0.0; pplane * chans];
                    for (b, taps) in plan.iter().enumerate() {
                        for t in taps {
                            for c in 0..chans {
                                let up = g[(b * chans + c) * plane + t.pixel];
                                for &(i, w) in &t.taps {
                                    gp[c * pplane + i] += w * up;
                                }
                            }
                        }
                    }
                    acc(*patch, gp);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        out: &Tensor,
        g: &[f64],
        acc: &mut impl FnMut(Var, Vec<f64>),
    ) {
        let (x, w) = (self.value(input), self.value(kernel));
        let [batch, chans, h, wid] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [filters, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        let (xd, wd) = (x.data(), w.data());
        let want_x = self.wants(input);
        let want_w = self.wants(kernel);
        let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut gw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
        for bi in 0..batch {
            for f in 0..filters {
                let gplane = &g[(bi * filters + f) * oh * ow..][..oh * ow];
                for c in 0..chans {
                    let base = (bi * chans + c) * h * wid;
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(oh, h, stride, ky as isize - pad as isize);
                        for kx in 0..k {
                            let widx = ((f * chans + c) * k + ky) * k + kx;
                            let wv = wd[widx];
                            let (ox0, ox1) = valid_range(ow, wid, stride, kx as isize - pad as isize);
                            let mut gwv = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let row = base + iy * wid;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kx - pad;
                                    let gv = grow[ox];
                                    if want_x {
                                        gx[row + ix] += wv * gv;
                                    }
                                    gwv += xd[row + ix] * gv;
                                }
                            }
                            if want_w {
                                gw[widx] += gwv;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            acc(input, gx);
        }
        if want_w {
            acc(kernel, gw);
        }
        if self.wants(bias) {
            let mut gb = vec![0.0; filters];
            for bi in 0..batch {
                for (f, gbv) in gb.iter_mut().enumerate() {
                    *gbv += g[(bi * filters + f) * oh * ow..][..oh * ow].iter().sum::<f64>();
                }
            }
            acc(bias, gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for stride in 1..4 {
                    for offset in -3isize..4 {
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "{out_len} {in_len} {stride} {offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn dense_identity_and_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.leaf(t(&[1], &[1.0]), true);
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn dense_bias_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 1.0]));
        let w = tape.leaf(t(&[2, 4], &[0.1; 8]), true);
        let b = tape.leaf(Tensor::zeros(&[4]), true);
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        // Three batch rows each contribute one.
        assert_eq!(grads.get(b).unwrap().data(), &[3.0; 4]);
        let x1 = tape.constant(t(&[1, 2], &[1.0, -2.0]));
        let y1 = tape.dense(x1, w, b).unwrap();
        let s1 = tape.sum(y1).unwrap();
        assert_eq!(tape.backward(s1).unwrap().get(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.dense(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let p = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let all_pos = tape.relu(p).unwrap();
        assert_eq!(tape.value(all_pos).data(), &[1.0, 2.0, 3.0]);

        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        let up = tape.constant(t(&[2], &[5.0, 5.0]));
        let z = tape.mul(y, up).unwrap();
        let s = tape.sum(z).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.25);
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y), &img);

        let k0 = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let b0 = tape.constant(t(&[2], &[0.5, -1.5]));
        let y0 = tape.conv2d(x, k0, b0, 1, Padding::Same).unwrap();
        let v = tape.value(y0);
        assert_eq!(v.shape(), &[1, 2, 4, 4]);
        assert!(v.data()[..16].iter().all(|&p| p == 0.5));
        assert!(v.data()[16..].iter().all(|&p| p == -1.5));
    }

    #[test]
    fn conv_output_extent_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 4, 4]);
        let y = tape.conv2d(x, k, b, 2, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3, 3]);
        assert!(matches!(
            tape.conv2d(x, k, b, 0, Padding::Same),
            Err(Error::InvalidArgument(_))
        ));
        let kbad = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, kbad, b, 1, Padding::Same),
            Err(Error::Shape(_))
        ));
        let small = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(small, k, b, 1, Padding::Valid).is_err());
    }

    #[test]
    fn batch_norm_constant_input_and_zero_gamma() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 2, 2], 3.0));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![3.0, 3.0]);

        let xr = tape.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64).sin()));
        let g0 = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(t(&[2], &[0.25, -0.75]));
        let (y, _) = tape.batch_norm_train(xr, g0, beta, 1e-5).unwrap();
        let v = tape.value(y).data();
        for (i, &p) in v.iter().enumerate() {
            assert_eq!(p, if (i / 4) % 2 == 0 { 0.25 } else { -0.75 });
        }
    }

    #[test]
    fn batch_norm_train_rejects_single_sample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batch_norm_train(x, g, b, 1e-5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 10]));
        let l = tape.softmax_cross_entropy(z, &[3, 7]).unwrap();
        assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 4];
        logits[2] = 40.0;
        let z = tape.constant(t(&[1, 4], &logits));
        let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[4]),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn backward_square_sum_and_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn consumers_accumulate() {
        // f(x) = g(x) + g(x) with g = sum(relu(x) * x).
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.5, 2.0]), true);
        let r = tape.relu(x).unwrap();
        let m = tape.mul(r, x).unwrap();
        let gsum = tape.sum(m).unwrap();
        let f = tape.add(gsum, gsum).unwrap();
        let grads = tape.backward(f).unwrap();
        let single = tape.backward(gsum).unwrap();
        let two: Vec<f64> = single.get(x).unwrap().data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), &two[..]);
    }

    #[test]
    fn overlay_replaces_only_planned_pixels() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.3));
        let patch = tape.leaf(t(&[1, 2, 2], &[0.1, 0.2, 0.3, 0.4]), true);
        let plan = vec![vec![OverlayTap {
            pixel: 3,
            taps: [(0, 0.5), (1, 0.5), (2, 0.0), (3, 0.0)],
        }]];
        let y = tape.overlay(img, patch, plan).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..3], &[0.3, 0.3, 0.3]);
        assert!((v[3] - 0.15).abs() < 1e-15);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(patch).unwrap().data(), &[0.5, 0.5, 0.0, 0.0]);
    }
}
