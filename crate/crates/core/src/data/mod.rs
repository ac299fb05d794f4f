//! Image classification datasets: MNIST from IDX files and a synthetic
//! frost-detection surrogate.

mod idx;
mod surrogate;

use serde::{Deserialize, Serialize};

pub use idx::{load_mnist, parse_idx_images, parse_idx_labels, IdxImages};
pub use surrogate::{gen_frost_surrogate, SurrogateParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// `N×C×H×W` images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("dataset images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, idx: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[idx * n..(idx + 1) * n]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// The first `n` items in stored order.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {n} items from a dataset of {}",
                self.len()
            )));
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![n, c, h, w], self.images.data()[..n * c * h * w].to_vec())?;
        Ok(Self {
            images,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationInput {
    pub index: usize,
    pub image: Tensor<f32>,
    pub label: usize,
}

/// The first `n` test items in stored order, whether or not any model gets
/// them right.
pub fn select_verification_inputs(ds: &Dataset, n: usize) -> Result<Vec<VerificationInput>> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} verification inputs from {} items",
            ds.len()
        )));
    }
    let shape = ds.image_shape().to_vec();
    (0..n)
        .map(|index| {
            Ok(VerificationInput {
                index,
                image: Tensor::new(shape.clone(), ds.image(index).to_vec())?,
                label: ds.label(index),
            })
        })
        .collect()
}
