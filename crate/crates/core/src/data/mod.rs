//! Datasets, the CIFAR-10 binary reader, the synthetic desk-scale generator
//! and lazily perturbed views.

mod cifar;
mod perturbation;
mod ppm;
mod sampler;
mod synthetic;
mod view;

pub use cifar::{encode_cifar10, load_cifar10, load_cifar10_splits, read_cifar10};
pub use perturbation::{
    apply_patch, apply_universal, disc_mask, overlay_taps, PerturbationKind, PerturbationSpec,
    Placement, PlacementRule,
};
pub use ppm::{encode_ppm, export_ppm};
pub use sampler::{sample_batch, BatchSampler};
pub use synthetic::{make_synthetic, make_synthetic_with, synthetic_splits, SyntheticParams};
pub use view::{BatchSource, PerturbedView};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Labelled images `[N, C, H, W]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::OutOfRange(format!("label {bad} with {classes} classes")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("dataset pixels must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the selected images and labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }
}

/// Train, validation and test datasets of one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        let imgs = Tensor::full(&[2, 1, 2, 2], 0.5);
        assert!(Dataset::new(imgs.clone(), vec![0, 1], 2, Split::Train).is_ok());
        assert!(Dataset::new(imgs.clone(), vec![0, 2], 2, Split::Train).is_err());
        assert!(Dataset::new(imgs, vec![0], 2, Split::Train).is_err());
        let bright = Tensor::full(&[1, 1, 2, 2], 1.5);
        assert!(Dataset::new(bright, vec![0], 2, Split::Train).is_err());
    }
}
