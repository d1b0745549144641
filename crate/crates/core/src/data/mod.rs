//! Datasets: the CIFAR-10 binary format, a synthetic substitute, and
//! deterministic batching.

pub mod batch;
pub mod cifar;
pub mod synth;

pub use batch::{batches, epoch_permutation, eval_batches, Batch};
pub use cifar::{
    load_cifar10_binary, load_cifar10_binary_with, load_cifar_file, parse_cifar_records,
    to_cifar_bytes,
};
pub use synth::{synth_generate, SyntheticSpec};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};

/// `N` images of shape `[C, H, W]` stored as bytes, with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImages {
    images: Vec<u8>,
    image_shape: [usize; 3],
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabeledImages {
    pub fn new(
        images: Vec<u8>,
        image_shape: [usize; 3],
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if labels.is_empty() || per == 0 {
            return Err(Error::config(
                "a dataset needs at least one non-empty image",
            ));
        }
        if images.len() != labels.len() * per {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} pixel bytes for {} images of {image_shape:?}",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::config(format!(
                "unsupported class count {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            image_shape,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// CRC-32 over shape, class count, labels and pixels.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for d in self.image_shape {
            h.update(&(d as u32).to_le_bytes());
        }
        h.update(&(self.num_classes as u32).to_le_bytes());
        h.update(&self.labels);
        h.update(&self.images);
        h.finalize()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.images[..n * self.image_len()].to_vec(),
            self.image_shape,
            self.labels[..n].to_vec(),
            self.num_classes,
        )
    }
}

/// A train/test pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

/// Where a run's data comes from: `synth`, `synth:SEED` or `cifar:DIR`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// The default synthetic task with the given generator seed.
    Synthetic(u64),
    Cifar(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Split> {
        match self {
            DataSource::Synthetic(seed) => synth_generate(&SyntheticSpec {
                seed: *seed,
                ..SyntheticSpec::default()
            }),
            DataSource::Cifar(dir) => load_cifar10_binary(dir),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic(seed) => write!(f, "synth:{seed}"),
            DataSource::Cifar(dir) => write!(f, "cifar:{}", dir.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |position: usize, message: String| Error::Parse { position, message };
        match s.split_once(':') {
            None if s == "synth" => Ok(DataSource::Synthetic(0)),
            Some(("synth", seed)) => seed
                .parse()
                .map(DataSource::Synthetic)
                .map_err(|_| bad(6, format!("expected a seed, found {seed:?}"))),
            Some(("cifar", dir)) if !dir.is_empty() => Ok(DataSource::Cifar(PathBuf::from(dir))),
            _ => Err(bad(
                0,
                format!("unknown data source {s:?}, expected synth, synth:SEED or cifar:DIR"),
            )),
        }
    }
}
