//! FP32 compute kernels shared by the tape and by plain inference.
//!
//! All kernels are direct loop nests over row-major buffers. Convolution uses
//! the cross-correlation convention (no kernel flip). Backward kernels
//! accumulate into caller-provided buffers.

use crate::error::{Error, Result};
use crate::tensor::log_softmax_f64;

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dimensions of a dense layer `x[B×I] · w[O×I]^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearGeometry {
    pub batch: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], bias_len: Option<usize>) -> Result<Self> {
        if x_shape.len() != 2 || w_shape.len() != 2 {
            return Err(Error::shape(
                "linear",
                format!("expected 2-d input and weight, got x{x_shape:?} w{w_shape:?}"),
            ));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::shape(
                "linear",
                format!(
                    "inner dimensions differ: x is {}x{}, w is {}x{}",
                    x_shape[0], x_shape[1], w_shape[0], w_shape[1]
                ),
            ));
        }
        if let Some(n) = bias_len {
            if n != w_shape[0] {
                return Err(Error::shape(
                    "linear",
                    format!("bias has {n} entries for {} outputs", w_shape[0]),
                ));
            }
        }
        Ok(Self {
            batch: x_shape[0],
            inputs: x_shape[1],
            outputs: w_shape[0],
        })
    }
}

pub fn linear_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: LinearGeometry,
    out: &mut [f32],
) {
    for b in 0..g.batch {
        let xr = &x[b * g.inputs..(b + 1) * g.inputs];
        let orow = &mut out[b * g.outputs..(b + 1) * g.outputs];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wr = &w[o * g.inputs..(o + 1) * g.inputs];
            *slot = dot(xr, wr) + bias.map_or(0.0, |bv| bv[o]);
        }
    }
}

pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: LinearGeometry,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    if let Some(dx) = dx {
        for b in 0..g.batch {
            let dxr = &mut dx[b * g.inputs..(b + 1) * g.inputs];
            for o in 0..g.outputs {
                let gy = dy[b * g.outputs + o];
                if gy != 0.0 {
                    axpy(gy, &w[o * g.inputs..(o + 1) * g.inputs], dxr);
                }
            }
        }
    }
    if let Some(dw) = dw {
        for b in 0..g.batch {
            let xr = &x[b * g.inputs..(b + 1) * g.inputs];
            for o in 0..g.outputs {
                let gy = dy[b * g.outputs + o];
                if gy != 0.0 {
                    axpy(gy, xr, &mut dw[o * g.inputs..(o + 1) * g.inputs]);
                }
            }
        }
    }
    if let Some(db) = db {
        for b in 0..g.batch {
            for o in 0..g.outputs {
                db[o] += dy[b * g.outputs + o];
            }
        }
    }
}

/// Dimensions of a 2-d convolution `x[B×C×H×W] ⋆ w[F×C×k×k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got x{x_shape:?} w{w_shape:?}"),
            ));
        }
        let (batch, channels, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (filters, wc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc != channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {channels} channels, kernel expects {wc}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} is not square"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let kernel = kh;
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kernel} exceeds padded input {}x{}",
                    height + 2 * pad,
                    width + 2 * pad
                ),
            ));
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Ok(Self {
            batch,
            channels,
            height,
            width,
            filters,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Output positions `[lo, hi)` along one axis whose input tap at kernel
    /// offset `k_off` falls inside the unpadded input.
    #[inline]
    pub fn valid_range(&self, k_off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k_off {
            (self.pad - k_off).div_ceil(s)
        } else {
            0
        };
        let hi = if in_len + self.pad > k_off {
            (in_len + self.pad - k_off).div_ceil(s).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn w_index(&self, f: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((f * self.channels + c) * self.kernel + ky) * self.kernel + kx
    }
}

pub fn conv2d_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeometry,
    out: &mut [f32],
) {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for f in 0..g.filters {
            let plane = &mut out[(b * g.filters + f) * out_plane..][..out_plane];
            plane.fill(bias.map_or(0.0, |bv| bv[f]));
            for c in 0..g.channels {
                let xp = &x[(b * g.channels + c) * in_plane..][..in_plane];
                for ky in 0..g.kernel {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
                    for kx in 0..g.kernel {
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                        let wv = w[g.w_index(f, c, ky, kx)];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xp[iy * g.width..][..g.width];
                            let orow = &mut plane[oy * g.out_w..][..g.out_w];
                            if g.stride == 1 {
                                let shift = kx as isize - g.pad as isize;
                                let src_lo = (ox_lo as isize + shift) as usize;
                                let src = &xrow[src_lo..src_lo + (ox_hi - ox_lo)];
                                axpy(wv, src, &mut orow[ox_lo..ox_hi]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeometry,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for f in 0..g.filters {
            let gp = &dy[(b * g.filters + f) * out_plane..][..out_plane];
            for c in 0..g.channels {
                let x_off = (b * g.channels + c) * in_plane;
                for ky in 0..g.kernel {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
                    for kx in 0..g.kernel {
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                        let wi = g.w_index(f, c, ky, kx);
                        let wv = w[wi];
                        let mut wacc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gp[oy * g.out_w..][..g.out_w];
                            let row_off = x_off + iy * g.width;
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxrow = &mut dx[row_off..][..g.width];
                                for ox in ox_lo..ox_hi {
                                    dxrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                            if dw.is_some() {
                                let xrow = &x[row_off..][..g.width];
                                for ox in ox_lo..ox_hi {
                                    wacc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wi] += wacc;
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for b in 0..g.batch {
            for f in 0..g.filters {
                let gp = &dy[(b * g.filters + f) * out_plane..][..out_plane];
                db[f] += gp.iter().sum::<f32>();
            }
        }
    }
}

pub fn relu_forward(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn relu_backward(x: &[f32], dy: &[f32], dx: &mut [f32]) {
    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
        if v > 0.0 {
            *d += g;
        }
    }
}

/// Output shape of a 2x2/stride-2 max pool (floor mode).
pub fn maxpool2_shape(x_shape: &[usize]) -> Result<Vec<usize>> {
    if x_shape.len() != 4 || x_shape[2] < 2 || x_shape[3] < 2 {
        return Err(Error::shape(
            "maxpool2",
            format!("expected [B,C,H>=2,W>=2], got {x_shape:?}"),
        ));
    }
    Ok(vec![x_shape[0], x_shape[1], x_shape[2] / 2, x_shape[3] / 2])
}

/// 2x2/stride-2 max pool. Returns the flat source index of every output;
/// the first maximum in window order wins.
pub fn maxpool2_forward<T: Copy + PartialOrd>(
    x: &[T],
    x_shape: &[usize],
    out: &mut [T],
) -> Vec<u32> {
    let (bc, h, w) = (x_shape[0] * x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = Vec::with_capacity(bc * oh * ow);
    for p in 0..bc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let taps = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = taps[0];
                for &t in &taps[1..] {
                    if x[t] > x[best] {
                        best = t;
                    }
                }
                out[(p * oh + oy) * ow + ox] = x[best];
                argmax.push(best as u32);
            }
        }
    }
    argmax
}

pub fn maxpool2_backward(argmax: &[u32], dy: &[f32], dx: &mut [f32]) {
    for (&src, &g) in argmax.iter().zip(dy) {
        dx[src as usize] += g;
    }
}

/// Mean cross-entropy of `[B×K]` logits against class indices, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    if classes == 0
        || !logits.len().is_multiple_of(classes)
        || logits.len() / classes != labels.len()
    {
        return Err(Error::shape(
            "cross_entropy",
            format!(
                "{} logits with {classes} classes vs {} labels",
                logits.len(),
                labels.len()
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let batch = labels.len();
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let logp = log_softmax_f64(row, 1.0);
        total -= logp[y];
        for k in 0..classes {
            let p = logp[k].exp();
            let target = if k == y { 1.0 } else { 0.0 };
            grad[b * classes + k] = ((p - target) / batch as f64) as f32;
        }
    }
    Ok(((total / batch as f64) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_hand_cases() {
        let g = LinearGeometry::new(&[1, 2], &[2, 2], Some(2)).unwrap();
        let mut out = [0.0; 2];
        linear_forward(
            &[1.0, 2.0],
            &[1.0, 0.0, 0.0, 1.0],
            Some(&[0.0, 0.0]),
            g,
            &mut out,
        );
        assert_eq!(out, [1.0, 2.0]);

        let g = LinearGeometry::new(&[1, 2], &[1, 2], Some(1)).unwrap();
        let mut out = [0.0; 1];
        linear_forward(&[1.0, 1.0], &[2.0, 3.0], Some(&[1.0]), g, &mut out);
        assert_eq!(out, [6.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let err = LinearGeometry::new(&[4, 8], &[3, 7], None).unwrap_err();
        assert!(err.to_string().contains("inner dimensions"), "{err}");
        assert!(LinearGeometry::new(&[4, 8], &[3, 8], Some(4)).is_err());
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, i, o) = (4, 8, 3);
        let x = random(b * i, &mut rng);
        let w = random(o * i, &mut rng);
        let bias = random(o, &mut rng);
        let g = LinearGeometry::new(&[b, i], &[o, i], Some(o)).unwrap();
        let mut out = vec![0.0; b * o];
        linear_forward(&x, &w, Some(&bias), g, &mut out);
        for bb in 0..b {
            for oo in 0..o {
                let mut acc = bias[oo] as f64;
                for ii in 0..i {
                    acc += x[bb * i + ii] as f64 * w[oo * i + ii] as f64;
                }
                assert!((out[bb * o + oo] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_sum_of_ones() {
        let g = ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 1));
        let mut out = [0.0];
        conv2d_forward(&[1.0; 9], &[1.0; 9], None, &g, &mut out);
        assert_eq!(out, [9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(2 * 5 * 6, &mut rng);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let g = ConvGeometry::new(&[2, 1, 5, 6], &[1, 1, 3, 3], 1, 1).unwrap();
        let mut out = vec![0.0; x.len()];
        conv2d_forward(&x, &w, None, &g, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 5, 5], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 2, 4, 4], &[1, 1, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 0, 1).is_err());
    }

    fn naive_conv(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0f64; g.batch * g.filters * g.out_h * g.out_w];
        for b in 0..g.batch {
            for f in 0..g.filters {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = bias[f] as f64;
                        for c in 0..g.channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.height as isize
                                        || ix >= g.width as isize
                                    {
                                        continue;
                                    }
                                    let xv = x[((b * g.channels + c) * g.height + iy as usize)
                                        * g.width
                                        + ix as usize];
                                    let wv =
                                        w[((f * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b * g.filters + f) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 2)] {
            let x = random(2 * 3 * 8 * 8, &mut rng);
            let w = random(4 * 3 * 3 * 3, &mut rng);
            let bias = random(4, &mut rng);
            let g = ConvGeometry::new(&[2, 3, 8, 8], &[4, 3, 3, 3], stride, pad).unwrap();
            let mut out = vec![0.0; g.out_shape().iter().product()];
            conv2d_forward(&x, &w, Some(&bias), &g, &mut out);
            let want = naive_conv(&x, &w, &bias, &g);
            for (a, b) in out.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (loss, _) = cross_entropy(&[0.5; 10], 10, &[3]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
        let mut saturated = [0.0f32; 4];
        saturated[2] = 100.0;
        let (loss, _) = cross_entropy(&saturated, 4, &[2]).unwrap();
        assert!(loss < 1e-6);
        assert!(cross_entropy(&[0.0; 4], 4, &[4]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(12, &mut rng);
        let labels = [0usize, 3, 1];
        let (loss, _) = cross_entropy(&logits, 4, &labels).unwrap();
        let mut want = 0.0f64;
        for (b, &y) in labels.iter().enumerate() {
            let row = &logits[b * 4..b * 4 + 4];
            let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            want += -((row[y] as f64).exp() / denom).ln();
        }
        want /= 3.0;
        assert!((loss as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = [1.0f32, 3.0, 3.0, 2.0];
        let mut out = [0.0f32];
        let arg = maxpool2_forward(&x, &[1, 1, 2, 2], &mut out);
        assert_eq!(out, [3.0]);
        assert_eq!(arg, vec![1]);
    }
}
