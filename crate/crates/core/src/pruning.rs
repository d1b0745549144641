//! Global unstructured magnitude pruning.
//!
//! All maskable weights are pooled into one magnitude ranking. With `n`
//! weights and target sparsity `ρ`, exactly `k = ⌈ρ·n⌉` weights are pruned:
//! the smallest magnitudes, and among equal magnitudes the ones latest in
//! `(layer, flat index)` order.

use std::cmp::Ordering;

use crate::autograd::Parameter;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// One bit per weight, packed LSB-first into bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBits {
    len: usize,
    bytes: Vec<u8>,
}

impl MaskBits {
    pub fn ones(len: usize) -> Self {
        let mut m = Self {
            len,
            bytes: vec![0xff; len.div_ceil(8)],
        };
        m.clear_padding();
        m
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            m.set(i, b);
        }
        m
    }

    /// Rejects a wrong byte count and set bits past `len`.
    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::shape(
                "mask",
                format!("{} bytes cannot hold exactly {len} bits", bytes.len()),
            ));
        }
        let m = Self { len, bytes };
        let mut canon = m.clone();
        canon.clear_padding();
        if canon != m {
            return Err(Error::shape("mask", "padding bits must be zero"));
        }
        Ok(m)
    }

    fn clear_padding(&mut self) {
        if !self.len.is_multiple_of(8) {
            let last = self.bytes.len() - 1;
            self.bytes[last] &= (1u8 << (self.len % 8)) - 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        assert!(i < self.len, "bit {i} out of range for {}", self.len);
        if keep {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// Binary keep-mask over every maskable tensor, in site order.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    layers: Vec<MaskBits>,
    rho: f64,
    gamma: f32,
}

impl PruneMask {
    pub fn new(layers: Vec<MaskBits>, rho: f64, gamma: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::config(format!("sparsity {rho} outside [0, 1)")));
        }
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::config(format!(
                "threshold must be non-negative, got {gamma}"
            )));
        }
        Ok(Self { layers, rho, gamma })
    }

    pub fn all_ones(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.iter().map(|&n| MaskBits::ones(n)).collect(),
            rho: 0.0,
            gamma: 0.0,
        }
    }

    pub fn layers(&self) -> &[MaskBits] {
        &self.layers
    }

    /// Target sparsity the mask was built for.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(MaskBits::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(MaskBits::count_ones).sum()
    }

    pub fn achieved_sparsity(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        1.0 - self.kept() as f64 / n as f64
    }

    /// Largest kept count consistent with the target sparsity.
    pub fn max_active(&self) -> usize {
        let n = self.total();
        n - pruned_count(n, self.rho)
    }

    fn check(&self, weights: &[usize]) -> Result<()> {
        if weights.len() != self.layers.len()
            || weights.iter().zip(&self.layers).any(|(&n, m)| n != m.len())
        {
            return Err(Error::shape(
                "apply_mask",
                format!(
                    "mask sizes {:?} vs weight sizes {weights:?}",
                    self.layers.iter().map(MaskBits::len).collect::<Vec<_>>()
                ),
            ));
        }
        Ok(())
    }
}

fn pruned_count(n: usize, rho: f64) -> usize {
    // the epsilon keeps e.g. 0.3·10 from rounding up to 4
    ((rho * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn validate_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::config(format!("sparsity {rho} outside [0, 1)")));
    }
    Ok(())
}

/// Magnitude-ascending order; equal magnitudes put later positions first
/// so that they are pruned first.
fn prune_order(weights: &[&DenseTensor]) -> Vec<(usize, usize)> {
    let mut pos: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .flat_map(|(l, w)| (0..w.len()).map(move |i| (l, i)))
        .collect();
    let mag = |&(l, i): &(usize, usize)| weights[l].data()[i].abs();
    pos.sort_by(|a, b| match mag(a).total_cmp(&mag(b)) {
        Ordering::Equal => b.cmp(a),
        other => other,
    });
    pos
}

/// `γ_ρ`: the smallest magnitude that survives, i.e. the `⌈ρn⌉`-th entry
/// (0-based) of the ascending magnitude list. `ρ = 0` gives 0 and pruning
/// everything gives `+∞`.
pub fn compute_global_threshold(weights: &[&DenseTensor], rho: f64) -> Result<f32> {
    validate_rho(rho)?;
    let n: usize = weights.iter().map(|w| w.len()).sum();
    if n == 0 {
        return Err(Error::config("no maskable weights"));
    }
    let k = pruned_count(n, rho);
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(f32::INFINITY);
    }
    let mut mags: Vec<f32> = weights
        .iter()
        .flat_map(|w| w.data().iter().map(|v| v.abs()))
        .collect();
    let (_, kth, _) = mags.select_nth_unstable_by(k, f32::total_cmp);
    Ok(*kth)
}

/// Threshold mask `M_j = [|W_j| ≥ γ]`. With ties at `γ` this may keep more
/// than `n − ⌈ρn⌉` weights; [`prune_global`] resolves ties exactly.
pub fn build_mask(weights: &[&DenseTensor], gamma: f32) -> PruneMask {
    let layers: Vec<MaskBits> = weights
        .iter()
        .map(|w| {
            let bits: Vec<bool> = w.data().iter().map(|v| v.abs() >= gamma).collect();
            MaskBits::from_bools(&bits)
        })
        .collect();
    let mut mask = PruneMask {
        layers,
        rho: 0.0,
        gamma: gamma.max(0.0),
    };
    // the nominal sparsity of a pure threshold mask is what it achieves
    mask.rho = mask.achieved_sparsity().min(1.0 - f64::EPSILON);
    mask
}

/// Global magnitude mask keeping exactly `n − ⌈ρn⌉` weights.
pub fn prune_global(weights: &[&DenseTensor], rho: f64) -> Result<PruneMask> {
    let gamma = compute_global_threshold(weights, rho)?;
    let n: usize = weights.iter().map(|w| w.len()).sum();
    let k = pruned_count(n, rho);
    let mut layers: Vec<MaskBits> = weights.iter().map(|w| MaskBits::ones(w.len())).collect();
    for &(l, i) in prune_order(weights).iter().take(k) {
        layers[l].set(i, false);
    }
    Ok(PruneMask { layers, rho, gamma })
}

/// `W ← M ⊙ W`, writing an exact `+0.0` at pruned coordinates.
pub fn apply_mask(weights: &mut [&mut DenseTensor], mask: &PruneMask) -> Result<()> {
    let sizes: Vec<usize> = weights.iter().map(|w| w.len()).collect();
    mask.check(&sizes)?;
    for (w, m) in weights.iter_mut().zip(&mask.layers) {
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            if !m.get(i) {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Zeroes the gradient at pruned coordinates.
pub fn mask_gradients(params: &mut [Parameter], mask: &PruneMask) -> Result<()> {
    let sizes: Vec<usize> = params.iter().step_by(2).map(|p| p.value().len()).collect();
    mask.check(&sizes)?;
    for (p, m) in params.iter_mut().step_by(2).zip(&mask.layers) {
        let g = p.grad_mut();
        for (i, v) in g.iter_mut().enumerate() {
            if !m.get(i) {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Number of entries that are not exactly zero.
pub fn count_nonzero(weights: &[&DenseTensor]) -> usize {
    weights
        .iter()
        .map(|w| w.data().iter().filter(|&&v| v != 0.0).count())
        .sum()
}

/// First-order saliency `|g_j · W_j|` per weight, for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport {
    pub scores: Vec<Vec<f32>>,
    /// Pooled 0/25/50/75/100 % quantiles (nearest rank).
    pub quantiles: [f32; 5],
}

pub fn taylor_saliency(weights: &[&Parameter]) -> Result<SaliencyReport> {
    if weights.is_empty() {
        return Err(Error::config("no parameters to score"));
    }
    let mut scores = Vec::with_capacity(weights.len());
    for (i, p) in weights.iter().enumerate() {
        if !p.has_grad() {
            return Err(Error::config(format!(
                "parameter {i} has no gradient; run a backward pass first"
            )));
        }
        scores.push(
            p.value()
                .data()
                .iter()
                .zip(p.grad().data())
                .map(|(w, g)| (w * g).abs())
                .collect::<Vec<f32>>(),
        );
    }
    let mut pooled: Vec<f32> = scores.iter().flatten().copied().collect();
    pooled.sort_by(f32::total_cmp);
    let at = |q: f64| pooled[((q * (pooled.len() - 1) as f64).round()) as usize];
    Ok(SaliencyReport {
        quantiles: [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)],
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> DenseTensor {
        DenseTensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_reference_case() {
        let w = t(&[0.1, -0.5, 0.3, 0.05]);
        assert_eq!(compute_global_threshold(&[&w], 0.5).unwrap(), 0.3);
        let m = build_mask(&[&w], 0.3);
        assert_eq!(
            m.layers()[0].iter().collect::<Vec<_>>(),
            [false, true, true, false]
        );
        let m = prune_global(&[&w], 0.5).unwrap();
        assert_eq!(
            m.layers()[0].iter().collect::<Vec<_>>(),
            [false, true, true, false]
        );
        assert_eq!(compute_global_threshold(&[&w], 0.0).unwrap(), 0.0);
        assert!(compute_global_threshold(&[&w], 1.0).is_err());
        assert!(compute_global_threshold(&[&w], -0.1).is_err());
    }

    #[test]
    fn pooling_crosses_layers() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[0.1, 0.2]);
        let m = prune_global(&[&a, &b], 0.5).unwrap();
        assert_eq!(m.layers()[0].count_ones(), 2);
        assert_eq!(m.layers()[1].count_ones(), 0);
    }

    #[test]
    fn ties_keep_earlier_positions() {
        let a = t(&[1.0, 1.0, 1.0]);
        let b = t(&[1.0]);
        let m = prune_global(&[&a, &b], 0.5).unwrap();
        assert_eq!(
            m.layers()[0].iter().collect::<Vec<_>>(),
            [true, true, false]
        );
        assert_eq!(m.layers()[1].iter().collect::<Vec<_>>(), [false]);
    }

    #[test]
    fn extreme_thresholds() {
        let w = t(&[0.1, -0.5, 0.3]);
        assert_eq!(build_mask(&[&w], 10.0).kept(), 0);
        assert_eq!(build_mask(&[&w], 0.0).kept(), 3);
    }

    #[test]
    fn apply_mask_identity_zero_and_idempotent() {
        let mut w = t(&[0.1, -0.5, 0.3, 0.05]);
        apply_mask(&mut [&mut w], &PruneMask::all_ones(&[4])).unwrap();
        assert_eq!(w, t(&[0.1, -0.5, 0.3, 0.05]));
        let m = prune_global(&[&w], 0.5).unwrap();
        apply_mask(&mut [&mut w], &m).unwrap();
        let once = w.clone();
        apply_mask(&mut [&mut w], &m).unwrap();
        assert_eq!(w, once);
        assert_eq!(w.data()[0].to_bits(), 0.0f32.to_bits());
        let zero = PruneMask::new(vec![MaskBits::zeros(4)], 0.5, 1.0).unwrap();
        apply_mask(&mut [&mut w], &zero).unwrap();
        assert_eq!(count_nonzero(&[&w]), 0);
        assert!(apply_mask(&mut [&mut w], &PruneMask::all_ones(&[3])).is_err());
    }

    #[test]
    fn mask_bits_pack_lsb_first() {
        let m = MaskBits::from_bools(&[true, false, true, true, false, false, false, false, true]);
        assert_eq!(m.as_bytes(), &[0b0000_1101, 0b0000_0001]);
        assert_eq!(MaskBits::ones(9).as_bytes(), &[0xff, 0x01]);
        assert!(MaskBits::from_bytes(9, vec![0xff, 0x03]).is_err());
        assert!(MaskBits::from_bytes(9, vec![0xff]).is_err());
        assert_eq!(MaskBits::from_bytes(9, vec![0x0d, 0x01]).unwrap(), m);
    }

    #[test]
    fn saliency_scores() {
        let mut p = Parameter::new(t(&[3.0, 0.0, -1.0]));
        assert!(taylor_saliency(&[&p]).is_err());
        p.grad_mut().copy_from_slice(&[2.0, 5.0, 4.0]);
        let r = taylor_saliency(&[&p]).unwrap();
        assert_eq!(r.scores[0], vec![6.0, 0.0, 4.0]);
        assert_eq!(r.quantiles[0], 0.0);
        assert_eq!(r.quantiles[4], 6.0);
    }
}
