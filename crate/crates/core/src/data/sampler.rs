use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BatchSource;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minibatch indices drawn without replacement within an epoch. The order is
/// reshuffled whenever fewer than a full batch of unseen indices remain; the
/// leftover indices of that epoch are dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Completed reshuffles so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self, size: usize) -> Result<Vec<usize>> {
        if size == 0 || size > self.order.len() {
            return Err(Error::invalid(format!(
                "batch size {size} with {} examples",
                self.order.len()
            )));
        }
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        Ok(out)
    }
}

/// Draws the next minibatch of `source` with `sampler`.
pub fn sample_batch<S: BatchSource + ?Sized>(
    source: &S,
    sampler: &mut BatchSampler,
    size: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if sampler.len() != source.len() {
        return Err(Error::invalid("sampler and source sizes differ"));
    }
    let idx = sampler.next_indices(size)?;
    source.batch(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batches_are_permutations() {
        let mut s = BatchSampler::new(10, 3).unwrap();
        for _ in 0..5 {
            let mut b = s.next_indices(10).unwrap();
            b.sort();
            assert_eq!(b, (0..10).collect::<Vec<_>>());
        }
        assert!(s.next_indices(11).is_err());
        assert!(s.next_indices(0).is_err());
    }

    #[test]
    fn no_repeats_within_epoch() {
        let mut s = BatchSampler::new(12, 9).unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_indices(3).unwrap()).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }
}
