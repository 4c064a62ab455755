//! Central finite differences against the tape's reverse pass.

use advgame::attack::{input_gradients, patch_objective};
use advgame::data::{overlay_taps, PlacementRule};
use advgame::model::{build_model, ModelConfig};
use advgame::tensor::{finite_difference_gradient, max_relative_error, Padding, Tape, Tensor, Var};
use advgame::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output coordinate contributes.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Largest relative error over every input of `build`.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_difference_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.leaf(if j == i { probe.clone() } else { v.clone() }, false))
                    .collect();
                let l = build(&mut t, &vs)?;
                t.value(l).item()
            },
            x,
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    worst
}

#[test]
fn dense_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..5 {
        let (b, i, o) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
        let inputs = [random(&[b, i], &mut rng), random(&[i, o], &mut rng), random(&[o], &mut rng)];
        let err = check(&inputs, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, trial)
        });
        assert!(err < 1e-4, "dense {b}x{i}x{o}: {err}");
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (trial, (stride, padding)) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)]
        .into_iter()
        .enumerate()
    {
        let (b, c, side, f) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(4..7), rng.gen_range(1..3));
        let inputs = [random(&[b, c, side, side], &mut rng), random(&[f, c, 3, 3], &mut rng), random(&[f], &mut rng)];
        let err = check(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
            project(t, y, trial as u64)
        });
        assert!(err < 1e-4, "conv2d stride {stride} {padding:?}: {err}");
    }
}

#[test]
fn relu_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Keep values away from the kink so the central difference is exact.
    let x = Tensor::from_fn(&[4, 7], |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen() { v } else { -v }
    });
    let err = check(&[x], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 3)
    });
    assert!(err < 1e-4, "relu: {err}");
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..3 {
        let (b, c, side) = (rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let inputs = [random(&[b, c, side, side], &mut rng), random(&[c], &mut rng), random(&[c], &mut rng)];
        let err = check(&inputs, |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, trial)
        });
        assert!(err < 1e-4, "batch norm train: {err}");
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let err = check(&inputs, |t, v| {
            let y = t.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, trial)
        });
        assert!(err < 1e-4, "batch norm infer: {err}");
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::from_fn(&[5, 4], |_| rng.gen_range(-3.0..3.0));
    let labels = [0, 3, 1, 1, 2];
    let err = check(&[logits.clone()], |t, v| t.softmax_cross_entropy(v[0], &labels));
    assert!(err < 1e-4, "softmax cross-entropy: {err}");
    let weights = [0.1, 0.4, 0.2, 0.05, 0.25];
    let err = check(&[logits], |t, v| t.weighted_cross_entropy(v[0], &labels, &weights));
    assert!(err < 1e-4, "weighted cross-entropy: {err}");
}

#[test]
fn overlay_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rule = PlacementRule::new(0.6, 0.5).unwrap();
    for trial in 0..4 {
        let (b, c, side, p) = (2, 3, 8, rng.gen_range(3..7));
        let plan: Vec<_> = (0..b)
            .map(|_| overlay_taps(side, side, p, &rule.sample(side, side, &mut rng)).unwrap())
            .collect();
        let inputs = [
            Tensor::from_fn(&[b, c, side, side], |_| rng.gen()),
            Tensor::from_fn(&[c, p, p], |_| rng.gen()),
        ];
        let err = check(&inputs, |t, v| {
            let y = t.overlay(v[0], v[1], plan.clone())?;
            project(t, y, trial)
        });
        assert!(err < 1e-3, "overlay patch {p}: {err}");
    }
}

#[test]
fn patch_objective_gradient_through_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = build_model(&ModelConfig::tiny(3, 8, 4), 7).unwrap();
    let images = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.gen());
    let labels = [0, 1, 2];
    let rule = PlacementRule::new(0.5, 0.3).unwrap();
    let placements: Vec<_> = (0..6).map(|_| rule.sample(8, 8, &mut rng)).collect();
    let patch = Tensor::from_fn(&[3, 5, 5], |_| rng.gen_range(0.2..0.8));
    let obj = patch_objective(&params, &patch, &images, &labels, &placements, Some(3), 0.5).unwrap();
    let numeric = finite_difference_gradient(
        |p| Ok(patch_objective(&params, p, &images, &labels, &placements, Some(3), 0.5)?.value),
        &patch,
        H,
    )
    .unwrap();
    let err = max_relative_error(&obj.gradient, &numeric, FLOOR);
    assert!(err < 1e-3, "patch objective: {err}");
}

#[test]
fn input_gradient_through_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = build_model(&ModelConfig::tiny(3, 8, 4), 8).unwrap();
    // Interior pixels, so the image clip is the identity nearby.
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.1..0.9));
    let labels = vec![1, 3];
    let (grads, _) = input_gradients(&params, images.clone(), &labels).unwrap();
    let numeric = finite_difference_gradient(
        |x| {
            let mut t = Tape::new();
            let v = t.leaf(params.logits(x)?, false);
            let l = t.softmax_cross_entropy(v, &labels)?;
            t.value(l).item()
        },
        &images,
        H,
    )
    .unwrap();
    let err = max_relative_error(&grads, &numeric, FLOOR);
    assert!(err < 1e-4, "input gradient: {err}");
}
