use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PerturbationSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that yields labelled batches by index.
pub trait BatchSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)>;
}

impl BatchSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Dataset::batch(self, indices)
    }
}

/// A dataset seen through a perturbation. Nothing is copied up front: the
/// view holds the base borrow, the perturbation and a seed, and perturbs
/// images only when a batch is materialized.
#[derive(Clone, Debug)]
pub struct PerturbedView<'a> {
    base: &'a Dataset,
    spec: PerturbationSpec,
    seed: u64,
}

impl<'a> PerturbedView<'a> {
    pub fn new(base: &'a Dataset, spec: PerturbationSpec, seed: u64) -> Result<Self> {
        let [c, h, w] = base.image_shape();
        let s = spec.xi().shape();
        let fits = match spec.epsilon() {
            Some(_) => s == [c, h, w],
            None => s[0] == c,
        };
        if !fits {
            return Err(Error::shape(format!(
                "perturbation {s:?} does not fit images {:?}",
                [c, h, w]
            )));
        }
        Ok(Self { base, spec, seed })
    }

    pub fn base(&self) -> &'a Dataset {
        self.base
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Perturbed copies of the selected images. Patch placements are drawn
    /// from a stream seeded by the view seed, so the same view and indices
    /// always give the same batch.
    pub fn materialize(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (images, labels) = self.base.batch(indices)?;
        if self.spec.is_identity() {
            return Ok((images, labels));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((self.spec.apply_batch(&images, &mut rng)?, labels))
    }
}

impl BatchSource for PerturbedView<'_> {
    fn len(&self) -> usize {
        self.base.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        self.materialize(indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PlacementRule, Split};

    fn data() -> Dataset {
        let imgs = Tensor::from_fn(&[4, 1, 8, 8], |i| (i % 5) as f64 / 5.0);
        Dataset::new(imgs, vec![0, 1, 0, 1], 2, Split::Train).unwrap()
    }

    #[test]
    fn identity_view_matches_base() {
        let d = data();
        let v = PerturbedView::new(&d, PerturbationSpec::zero_universal([1, 8, 8], 0.1).unwrap(), 1).unwrap();
        assert_eq!(v.materialize(&[2, 0]).unwrap(), d.batch(&[2, 0]).unwrap());
    }

    #[test]
    fn same_seed_same_patch_batch() {
        let d = data();
        let rule = PlacementRule::new(0.5, 0.3).unwrap();
        let spec = PerturbationSpec::gray_patch(1, 4, rule).unwrap();
        let a = PerturbedView::new(&d, spec.clone(), 7).unwrap();
        let b = PerturbedView::new(&d, spec.clone(), 7).unwrap();
        let c = PerturbedView::new(&d, spec, 8).unwrap();
        assert_eq!(a.materialize(&[0, 1, 2]).unwrap(), b.materialize(&[0, 1, 2]).unwrap());
        assert_ne!(a.materialize(&[0, 1, 2]).unwrap(), c.materialize(&[0, 1, 2]).unwrap());
    }

    #[test]
    fn mismatched_perturbation_is_rejected() {
        let d = data();
        let spec = PerturbationSpec::zero_universal([3, 8, 8], 0.1).unwrap();
        assert!(PerturbedView::new(&d, spec, 0).is_err());
    }
}
