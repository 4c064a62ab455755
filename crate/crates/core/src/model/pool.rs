use std::path::PathBuf;
use std::sync::Arc;

use super::{forward, load_checkpoint, Mode, Params};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Where a frozen classifier lives.
#[derive(Clone, Debug)]
pub enum SnapshotSource {
    Memory(Arc<Params>),
    /// Checkpoint file, read on every access.
    Disk(PathBuf),
}

/// A frozen classifier from outer iteration `iteration`.
#[derive(Clone, Debug)]
pub struct ClassifierSnapshot {
    iteration: usize,
    source: SnapshotSource,
    note: String,
}

impl ClassifierSnapshot {
    /// Copies `params`; later changes to the caller's params do not reach
    /// the snapshot.
    pub fn in_memory(iteration: usize, params: &Params, note: impl Into<String>) -> Self {
        Self {
            iteration,
            source: SnapshotSource::Memory(Arc::new(params.clone())),
            note: note.into(),
        }
    }

    pub fn on_disk(iteration: usize, path: impl Into<PathBuf>, note: impl Into<String>) -> Self {
        Self {
            iteration,
            source: SnapshotSource::Disk(path.into()),
            note: note.into(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn note(&self) -> &str {
        &self.note
    }

    pub fn source(&self) -> &SnapshotSource {
        &self.source
    }

    pub fn load(&self) -> Result<Arc<Params>> {
        match &self.source {
            SnapshotSource::Memory(p) => Ok(Arc::clone(p)),
            SnapshotSource::Disk(path) => Ok(Arc::new(load_checkpoint(path)?)),
        }
    }
}

/// The support of the uniform mixture of past classifiers.
#[derive(Clone, Debug, Default)]
pub struct ClassifierPool {
    members: Vec<ClassifierSnapshot>,
}

impl ClassifierPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a snapshot; iteration indices must be strictly increasing.
    pub fn push(&mut self, snapshot: ClassifierSnapshot) -> Result<()> {
        if let Some(last) = self.members.last() {
            if snapshot.iteration <= last.iteration {
                return Err(Error::invalid(format!(
                    "snapshot iteration {} does not follow {}",
                    snapshot.iteration, last.iteration
                )));
            }
        }
        self.members.push(snapshot);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ClassifierSnapshot] {
        &self.members
    }
}

/// A single network or a uniform mixture of networks, evaluated in
/// inference mode.
pub trait Classifier {
    fn member_count(&self) -> usize;

    /// Calls `f` on every member in order.
    fn for_each_member(&self, f: &mut dyn FnMut(&Params) -> Result<()>) -> Result<()>;

    /// Records every member's logits for `input` on `tape`.
    fn member_logits(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.member_count());
        self.for_each_member(&mut |p| {
            out.push(forward(p, tape, input, Mode::Infer, false)?.logits);
            Ok(())
        })?;
        if out.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(out)
    }

    /// Records the expected cross-entropy of a uniformly drawn member.
    fn expected_loss_on_tape(&self, tape: &mut Tape, input: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.member_logits(tape, input)?;
        mean_of(tape, &logits, |tape, z| tape.softmax_cross_entropy(z, labels))
    }

    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        pool_predict(self, batch)
    }
}

/// Averages `term(member logits)` with equal weights; a single member is
/// returned unchanged.
pub(crate) fn mean_of(
    tape: &mut Tape,
    logits: &[Var],
    mut term: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let terms = logits
        .iter()
        .map(|&z| term(tape, z))
        .collect::<Result<Vec<_>>>()?;
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, w)).collect();
    tape.weighted_sum(&weighted)
}

impl Classifier for Params {
    fn member_count(&self) -> usize {
        1
    }

    fn for_each_member(&self, f: &mut dyn FnMut(&Params) -> Result<()>) -> Result<()> {
        f(self)
    }
}

impl Classifier for ClassifierPool {
    fn member_count(&self) -> usize {
        self.members.len()
    }

    fn for_each_member(&self, f: &mut dyn FnMut(&Params) -> Result<()>) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::EmptyPool);
        }
        for m in &self.members {
            let p = m.load()?;
            f(&p)?;
        }
        Ok(())
    }
}

/// `(1/|pool|) Σ_i CE(f_i(batch), labels)` with every member in inference
/// mode.
pub fn pool_expected_loss<C: Classifier + ?Sized>(pool: &C, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    if pool.member_count() == 0 {
        return Err(Error::EmptyPool);
    }
    let mut tape = Tape::new();
    let input = tape.constant(batch.clone());
    let loss = pool.expected_loss_on_tape(&mut tape, input, labels)?;
    tape.value(loss).item()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Argmax of the members' averaged softmax probabilities (lowest class on
/// ties). A one-member pool uses its logits directly.
pub fn pool_predict<C: Classifier + ?Sized>(pool: &C, batch: &Tensor) -> Result<Vec<usize>> {
    let n = pool.member_count();
    if n == 0 {
        return Err(Error::EmptyPool);
    }
    let mut logits_only = None;
    let mut sum: Option<Vec<f64>> = None;
    let mut classes = 0;
    pool.for_each_member(&mut |p| {
        let z = p.logits(batch)?;
        classes = z.shape()[1];
        if n == 1 {
            logits_only = Some(z);
            return Ok(());
        }
        let probs = softmax_rows(&z);
        match &mut sum {
            Some(s) => s.iter_mut().zip(&probs).for_each(|(a, b)| *a += b),
            None => sum = Some(probs),
        }
        Ok(())
    })?;
    if let Some(z) = logits_only {
        return Ok(z.data().chunks(classes).map(argmax_lowest).collect());
    }
    let sum = sum.ok_or(Error::EmptyPool)?;
    Ok(predict_from_summed_probs(&sum, classes, n))
}

pub(crate) fn predict_from_summed_probs(sum: &[f64], classes: usize, members: usize) -> Vec<usize> {
    let inv = 1.0 / members as f64;
    sum.chunks(classes)
        .map(|row| {
            let avg: Vec<f64> = row.iter().map(|v| v * inv).collect();
            argmax_lowest(&avg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn batch() -> Tensor {
        Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn averaged_probabilities_decide() {
        // (0.6, 0.4) and (0.2, 0.8) average to (0.4, 0.6).
        let sum = [0.6 + 0.2, 0.4 + 0.8];
        assert_eq!(predict_from_summed_probs(&sum, 2, 2), vec![1]);
        assert_eq!(predict_from_summed_probs(&[1.0, 1.0], 2, 2), vec![0]);
    }

    #[test]
    fn empty_pool_errors() {
        let pool = ClassifierPool::new();
        assert!(matches!(pool_expected_loss(&pool, &batch(), &[0, 1, 0]), Err(Error::EmptyPool)));
        assert!(matches!(pool_predict(&pool, &batch()), Err(Error::EmptyPool)));
    }

    #[test]
    fn single_and_duplicated_members() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        let p = build_model(&cfg, 5).unwrap();
        let labels = [0, 1, 1];
        let single = pool_expected_loss(&p, &batch(), &labels).unwrap();
        let mut pool = ClassifierPool::new();
        pool.push(ClassifierSnapshot::in_memory(0, &p, "a")).unwrap();
        assert_eq!(pool_expected_loss(&pool, &batch(), &labels).unwrap(), single);
        assert_eq!(pool_predict(&pool, &batch()).unwrap(), p.predict(&batch()).unwrap());
        pool.push(ClassifierSnapshot::in_memory(1, &p, "b")).unwrap();
        assert_eq!(pool_expected_loss(&pool, &batch(), &labels).unwrap(), single);
    }

    #[test]
    fn push_requires_increasing_iterations() {
        let p = build_model(&ModelConfig::tiny(1, 8, 2), 5).unwrap();
        let mut pool = ClassifierPool::new();
        pool.push(ClassifierSnapshot::in_memory(2, &p, "")).unwrap();
        assert!(pool.push(ClassifierSnapshot::in_memory(2, &p, "")).is_err());
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut p = build_model(&ModelConfig::tiny(1, 8, 2), 5).unwrap();
        let snap = ClassifierSnapshot::in_memory(0, &p, "");
        let before = snap.load().unwrap().logits(&batch()).unwrap();
        let w = p.get("dense6.weight").unwrap().clone();
        p.set("dense6.weight", Tensor::full(w.shape(), 0.3)).unwrap();
        assert_eq!(snap.load().unwrap().logits(&batch()).unwrap(), before);
    }
}
