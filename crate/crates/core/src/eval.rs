//! Clean and adversarial accuracy, with evaluation perturbations crafted
//! fresh against the classifier under test.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;

use crate::data::{Dataset, PerturbationSpec, Split, Splits};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Classifier};
use crate::train::{stream, ConmanAttack};

/// Default cap on the number of evaluated samples per split.
pub const EVAL_SAMPLES: usize = 2000;

/// Evaluation streams start here, away from the training streams.
const STREAM_EVAL: u64 = 1 << 32;

pub const CSV_HEADER: &str = "iter,split,clean_acc,adv_acc,attack,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub split: Split,
    pub clean_accuracy: f64,
    pub adv_accuracy: f64,
    pub attack: String,
    pub seconds: f64,
}

/// `min(n, EVAL_SAMPLES)`.
pub fn default_sample_size(n: usize) -> usize {
    n.min(EVAL_SAMPLES)
}

/// Indices of the evaluated subset: the whole split when `sample_size`
/// reaches its length, otherwise a uniform draw without replacement.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, sample_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("evaluation on an empty dataset"));
    }
    if sample_size == 0 {
        return Err(Error::invalid("evaluation sample size must be positive"));
    }
    if sample_size >= n {
        return Ok((0..n).collect());
    }
    let mut idx = index::sample(rng, n, sample_size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn hits(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Fraction of correct argmax predictions over a sampled subset.
pub fn accuracy<C, R>(classifier: &C, data: &Dataset, sample_size: usize, rng: &mut R) -> Result<f64>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    let idx = sample_indices(data.len(), sample_size, rng)?;
    let (images, labels) = data.batch(&idx)?;
    Ok(hits(&classifier.predict(&images)?, &labels))
}

/// Accuracy and prediction counts of `classifier` on a sampled subset with
/// `spec` applied (patch placements drawn from `rng`).
fn perturbed_predictions<C, R>(
    classifier: &C,
    data: &Dataset,
    spec: &PerturbationSpec,
    idx: &[usize],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    let (images, labels) = data.batch(idx)?;
    let perturbed = if spec.is_identity() {
        images
    } else {
        spec.apply_batch(&images, rng)?
    };
    Ok((classifier.predict(&perturbed)?, labels))
}

/// Accuracy under an existing perturbation.
pub fn perturbed_accuracy<C, R>(
    classifier: &C,
    data: &Dataset,
    spec: &PerturbationSpec,
    sample_size: usize,
    rng: &mut R,
) -> Result<f64>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    let idx = sample_indices(data.len(), sample_size, rng)?;
    let (pred, labels) = perturbed_predictions(classifier, data, spec, &idx, rng)?;
    Ok(hits(&pred, &labels))
}

/// Fraction of sampled images predicted as `target` under `spec`.
pub fn target_rate<C, R>(
    classifier: &C,
    data: &Dataset,
    spec: &PerturbationSpec,
    target: usize,
    sample_size: usize,
    rng: &mut R,
) -> Result<f64>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    if target >= data.classes() {
        return Err(Error::OutOfRange(format!("target class {target} with {} classes", data.classes())));
    }
    let idx = sample_indices(data.len(), sample_size, rng)?;
    let (pred, _) = perturbed_predictions(classifier, data, spec, &idx, rng)?;
    Ok(pred.iter().filter(|&&p| p == target).count() as f64 / pred.len() as f64)
}

/// Crafts a fresh perturbation against `classifier` on `craft_on` and
/// measures accuracy on `evaluate_on` under it. The evaluated subset is
/// drawn from `rng` before the attack runs, so with the same generator state
/// it matches the subset `accuracy` would use.
pub fn adv_accuracy<C, R>(
    classifier: &C,
    craft_on: &Dataset,
    evaluate_on: &Dataset,
    attack: &ConmanAttack,
    sample_size: usize,
    rng: &mut R,
) -> Result<(f64, PerturbationSpec)>
where
    C: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    let idx = sample_indices(evaluate_on.len(), sample_size, rng)?;
    let spec = attack.craft(classifier, craft_on, rng)?;
    let (pred, labels) = perturbed_predictions(classifier, evaluate_on, &spec, &idx, rng)?;
    Ok((hits(&pred, &labels), spec))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Samples per split; `None` means `min(N, EVAL_SAMPLES)`.
    pub sample_size: Option<usize>,
    /// Fill the `seconds` column; left at zero otherwise so reruns are
    /// byte-identical.
    pub record_time: bool,
}

/// `iter_NNNN.ckpt` files of `dir`, ordered by iteration.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let iteration = name
            .strip_prefix("iter_")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|digits| digits.parse::<usize>().ok());
        if let Some(n) = iteration {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

/// One row per checkpoint and split. Each checkpoint gets its own generator
/// stream; its perturbation is crafted fresh on the train split and then
/// evaluated on train, valid and test in that order.
pub fn evaluate_checkpoint_series(
    dir: &Path,
    splits: &Splits,
    attack: &ConmanAttack,
    options: &EvalOptions,
) -> Result<Vec<MetricsRow>> {
    attack.validate()?;
    let checkpoints = list_checkpoints(dir)?;
    if checkpoints.is_empty() {
        return Err(Error::invalid(format!("no checkpoints in {}", dir.display())));
    }
    let mut rows = Vec::with_capacity(checkpoints.len() * Split::ALL.len());
    for (iteration, path) in checkpoints {
        let start = Instant::now();
        let params = load_checkpoint(&path)?;
        let mut rng = stream(options.seed, STREAM_EVAL + iteration as u64);
        let spec = attack.craft(&params, &splits.train, &mut rng)?;
        for split in Split::ALL {
            let data = splits.get(split);
            let size = options.sample_size.unwrap_or_else(|| default_sample_size(data.len()));
            let idx = sample_indices(data.len(), size, &mut rng)?;
            let (images, labels) = data.batch(&idx)?;
            let clean = hits(&params.predict(&images)?, &labels);
            let (pred, labels) = perturbed_predictions(&params, data, &spec, &idx, &mut rng)?;
            rows.push(MetricsRow {
                iteration,
                split,
                clean_accuracy: clean,
                adv_accuracy: hits(&pred, &labels),
                attack: attack.kind_name().to_string(),
                seconds: if options.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
            });
        }
    }
    Ok(rows)
}

/// CSV text with a header row and LF line endings.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{:.6}",
            r.iteration, r.split, r.clean_accuracy, r.adv_accuracy, r.attack, r.seconds
        );
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts from a fixed rule on the first pixel of each image.
    struct Rule(fn(f64) -> usize);

    impl Classifier for Rule {
        fn member_count(&self) -> usize {
            1
        }

        fn for_each_member(&self, _: &mut dyn FnMut(&Params) -> Result<()>) -> Result<()> {
            Ok(())
        }

        fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
            Ok((0..batch.shape()[0]).map(|i| (self.0)(batch.item_slice(i)[0])).collect())
        }
    }

    /// Four classes, label encoded in the first pixel as `label / 10`.
    fn labelled(n: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| if i % 4 == 0 { labels[i / 4] as f64 / 10.0 } else { 0.5 });
        Dataset::new(images, labels, 4, Split::Test).unwrap()
    }

    #[test]
    fn oracle_and_constant_classifiers() {
        let data = labelled(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let oracle = Rule(|v| (v * 10.0).round() as usize);
        assert_eq!(accuracy(&oracle, &data, 16, &mut rng).unwrap(), 1.0);
        assert_eq!(accuracy(&Rule(|_| 2), &data, 1000, &mut rng).unwrap(), 0.25);
    }

    #[test]
    fn subset_draw_is_sorted_distinct_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx = sample_indices(100, 30, &mut rng).unwrap();
        assert_eq!(idx.len(), 30);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(5, 9, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_indices(0, 9, &mut rng).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![MetricsRow {
            iteration: 3,
            split: Split::Valid,
            clean_accuracy: 0.5,
            adv_accuracy: 1.0 / 3.0,
            attack: "universal".into(),
            seconds: 0.0,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "iter,split,clean_acc,adv_acc,attack,seconds\n3,valid,0.500000,0.333333,universal,0.000000\n"
        );
    }

    #[test]
    fn checkpoint_listing_ignores_other_files() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["iter_0002.ckpt", "iter_0010.ckpt", "iter_0001.ckpt", "notes.txt", "iter_x.ckpt"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        let found: Vec<usize> = list_checkpoints(dir.path()).unwrap().into_iter().map(|c| c.0).collect();
        assert_eq!(found, vec![1, 2, 10]);
    }
}
