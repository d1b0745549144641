//! Deterministic mini-batching. The order of epoch `e` is a pure function of
//! `(seed, e)`; pixels are scaled to `[0, 1]` when a batch is built.

use rand::seq::SliceRandom;

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::rng::substream_indexed;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, C, H, W]`.
    pub x: DenseTensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream_indexed(seed, "data", epoch));
    idx
}

/// Gathers the given samples into a normalized batch.
pub fn gather(data: &LabeledImages, indices: &[usize]) -> Result<Batch> {
    let [c, h, w] = data.image_shape();
    let mut x = Vec::with_capacity(indices.len() * data.image_len());
    for &i in indices {
        x.extend(data.image(i).iter().map(|&p| p as f32 / 255.0));
    }
    Ok(Batch {
        x: DenseTensor::new(vec![indices.len(), c, h, w], x)?,
        labels: indices.iter().map(|&i| data.label(i)).collect(),
        indices: indices.to_vec(),
    })
}

/// Shuffled batches for one epoch; the last one may be short.
pub fn batches(
    data: &LabeledImages,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::config(format!(
            "batch size {batch_size} must be in [1, {}]",
            data.len()
        )));
    }
    epoch_permutation(data.len(), seed, epoch)
        .chunks(batch_size)
        .map(|c| gather(data, c))
        .collect()
}

/// Batches in dataset order, for evaluation.
pub fn eval_batches(data: &LabeledImages, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(batch_size).map(|c| gather(data, c)).collect()
}
