//! Procedural 3-channel image classes for desk-scale experiments.
//!
//! Every class mixes two cues. The first is a large low-frequency shape (a
//! separable cosine, one per class, with per-image sign, amplitude and phase
//! jitter), so it can only be read non-linearly. The second is a faint
//! class-specific colour tint with no gray component. The tint is linearly
//! readable and quick to fit, but it sits below typical perturbation budgets;
//! the shape is slower to learn and survives small perturbations.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticParams {
    /// Shape amplitude range.
    pub shape_min: f64,
    pub shape_max: f64,
    /// Maximum per-image phase shift of the shape along each axis, radians.
    pub shape_jitter: f64,
    /// Largest per-channel offset of the class colour tint.
    pub tint: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum per-image brightness offset.
    pub brightness: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            shape_min: 0.15,
            shape_max: 0.3,
            shape_jitter: 0.8,
            tint: 0.025,
            noise: 0.05,
            brightness: 0.1,
        }
    }
}

/// Cosine indices `(a, b)` of each class shape, by increasing `a + b`,
/// skipping the constant pattern.
fn shape_indices(classes: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(classes);
    let mut total = 1;
    while out.len() < classes {
        for a in 0..=total {
            if out.len() < classes {
                out.push((a as f64, (total - a) as f64));
            }
        }
        total += 1;
    }
    out
}

/// Zero-mean colour offset of each class: points on a circle in the
/// chromatic plane orthogonal to gray, scaled so the largest channel offset
/// is `amplitude`.
fn class_tints(classes: usize, amplitude: f64) -> Vec<[f64; CHANNELS]> {
    let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    (0..classes)
        .map(|k| {
            let (sin, cos) = (2.0 * PI * k as f64 / classes as f64).sin_cos();
            let raw: Vec<f64> = (0..CHANNELS).map(|c| cos * u[c] + sin * v[c]).collect();
            let peak = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            [0, 1, 2].map(|c| amplitude * raw[c] / peak)
        })
        .collect()
}

/// `make_synthetic_with` under the default parameters.
pub fn make_synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(&SyntheticParams::default(), classes, per_class, side, seed, Split::Train)
}

/// `classes * per_class` images of `3 x side x side`, labels cycling through
/// the classes. Class definitions do not depend on `seed`; the seed only
/// drives the per-image variation, so different seeds give independent
/// samples of the same task.
pub fn make_synthetic_with(
    params: &SyntheticParams,
    classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 || per_class < 2 || side < 8 {
        return Err(Error::invalid(format!(
            "synthetic data needs K >= 2, M >= 2, H >= 8 (got {classes}, {per_class}, {side})"
        )));
    }
    let p = params;
    let finite = [p.shape_min, p.shape_max, p.shape_jitter, p.tint, p.noise, p.brightness];
    if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || p.shape_min > p.shape_max {
        return Err(Error::invalid(format!("invalid synthetic parameters {p:?}")));
    }
    let n = classes * per_class;
    let plane = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let shapes = shape_indices(classes);
    let tints = class_tints(classes, params.tint);
    let mut pixels = Vec::with_capacity(n * CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let amp = sign * rng.gen_range(params.shape_min..=params.shape_max);
        let offset = if params.brightness > 0.0 {
            rng.gen_range(-params.brightness..=params.brightness)
        } else {
            0.0
        };
        let (a, b) = shapes[k];
        let (jy, jx) = if params.shape_jitter > 0.0 {
            let j = params.shape_jitter;
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        for c in 0..CHANNELS {
            for y in 0..side {
                for x in 0..side {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    let shape = amp * (PI * a * py / side as f64 + jy).cos() * (PI * b * px / side as f64 + jx).cos();
                    let v = 0.5 + offset + tints[k][c] + shape + normal.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, CHANNELS, side, side], pixels)?, labels, classes, split)
}

/// Independent train, validation and test samples of one synthetic task.
pub fn synthetic_splits(
    params: &SyntheticParams,
    classes: usize,
    train_per_class: usize,
    eval_per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Splits> {
    let base = seed.wrapping_mul(3);
    Ok(Splits {
        train: make_synthetic_with(params, classes, train_per_class, side, base, Split::Train)?,
        valid: make_synthetic_with(params, classes, eval_per_class, side, base.wrapping_add(1), Split::Valid)?,
        test: make_synthetic_with(params, classes, eval_per_class, side, base.wrapping_add(2), Split::Test)?,
    })
}
