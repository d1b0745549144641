//! Integer-only inference kernels.
//!
//! Operands are `u8` codes; the hot loops work on zero-point-centred `i16`
//! values with `i32` accumulation. The float ratio `s_x·s_w/s_out` is folded
//! once into a 31-bit fixed-point mantissa plus a right shift, and every
//! rounding is half-to-even.

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::tensor::DenseTensor;

use super::affine::{dequantize, quantize, quantize_weight, QuantParams};

/// Largest reduction length for which `i32` accumulation cannot overflow:
/// `2^15 · 255² < 2^31`.
pub const MAX_REDUCTION: usize = 1 << 15;

/// An 8-bit tensor with its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
    qparams: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>, qparams: QuantParams) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::shape(
                "quant_tensor",
                format!("shape {shape:?} vs {} codes", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            qparams,
        })
    }

    pub fn quantize(t: &DenseTensor, qparams: QuantParams) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| quantize(v, qparams)).collect(),
            qparams,
        }
    }

    /// Quantizes weights so that nonzero values keep nonzero codes.
    pub fn quantize_weights(t: &DenseTensor, qparams: QuantParams) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t
                .data()
                .iter()
                .map(|&v| quantize_weight(v, qparams))
                .collect(),
            qparams,
        }
    }

    pub fn dequantize(&self) -> DenseTensor {
        let data = self
            .data
            .iter()
            .map(|&q| dequantize(q, self.qparams))
            .collect();
        DenseTensor::new(self.shape.clone(), data).expect("shape validated at construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn qparams(&self) -> QuantParams {
        self.qparams
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Codes different from the zero point, i.e. nonzero real values.
    pub fn count_nonzero(&self) -> usize {
        let z = self.qparams.zero_point_u8();
        self.data.iter().filter(|&&q| q != z).count()
    }

    pub(crate) fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn centered(&self) -> Vec<i16> {
        let z = self.qparams.zero_point() as i16;
        self.data.iter().map(|&q| q as i16 - z).collect()
    }
}

/// Fixed-point form of a positive real multiplier: `m · 2^-shift` with
/// `m ∈ [2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantizer {
    multiplier: i64,
    shift: u32,
}

impl Requantizer {
    pub fn new(real: f64) -> Result<Self> {
        if !(real.is_finite() && real > 0.0 && real < (1u64 << 31) as f64) {
            return Err(Error::config(format!(
                "requantization multiplier {real} outside (0, 2^31)"
            )));
        }
        let mut exp = real.log2().floor() as i32 + 1;
        let mut frac = real / 2f64.powi(exp);
        if frac >= 1.0 {
            frac /= 2.0;
            exp += 1;
        } else if frac < 0.5 {
            frac *= 2.0;
            exp -= 1;
        }
        let mut mantissa = (frac * (1u64 << 31) as f64).round_ties_even() as i64;
        if mantissa == 1 << 31 {
            mantissa >>= 1;
            exp += 1;
        }
        let shift = 31 - exp;
        if shift < 0 {
            return Err(Error::config(format!(
                "requantization multiplier {real} too large"
            )));
        }
        Ok(Self {
            multiplier: mantissa,
            shift: shift as u32,
        })
    }

    pub fn from_scales(
        input: QuantParams,
        weight: QuantParams,
        output: QuantParams,
    ) -> Result<Self> {
        Self::new(input.scale() as f64 * weight.scale() as f64 / output.scale() as f64)
    }

    pub fn multiplier(&self) -> i64 {
        self.multiplier
    }

    pub fn shift(&self) -> u32 {
        self.shift
    }

    /// `round_half_even(acc · m / 2^shift)`.
    #[inline]
    pub fn apply(&self, acc: i32) -> i64 {
        rounding_shift(acc as i64 * self.multiplier, self.shift)
    }
}

/// Arithmetic right shift with round-half-to-even.
#[inline]
pub fn rounding_shift(value: i64, shift: u32) -> i64 {
    if shift == 0 {
        return value;
    }
    if shift >= 63 {
        // |value| < 2^62 for every product formed here, so it rounds to zero.
        return 0;
    }
    let floor = value >> shift;
    let rem = value - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

#[inline]
fn dot_i16(a: &[i16], b: &[i16]) -> i32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as i32 * y as i32)
        .fold(0i32, |acc, v| acc.wrapping_add(v))
}

#[inline]
fn requantize(acc: i32, rq: &Requantizer, z_out: i64, floor: i64) -> u8 {
    (rq.apply(acc) + z_out).clamp(floor, 255) as u8
}

/// A prepared integer dense layer: centred weights, `i32` bias, requantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Linear {
    weight: QuantTensor,
    centered: Vec<i16>,
    bias: Vec<i32>,
    input: QuantParams,
    output: QuantParams,
    requant: Requantizer,
    relu: bool,
}

impl Int8Linear {
    pub fn new(
        weight: QuantTensor,
        bias: Vec<i32>,
        input: QuantParams,
        output: QuantParams,
        relu: bool,
    ) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape(
                "int8_linear",
                format!("weight {:?} is not 2-d", weight.shape()),
            ));
        }
        let (outputs, inputs) = (weight.shape()[0], weight.shape()[1]);
        if inputs > MAX_REDUCTION {
            return Err(Error::config(format!(
                "int8_linear reduction length {inputs} exceeds {MAX_REDUCTION}"
            )));
        }
        if bias.len() != outputs {
            return Err(Error::shape(
                "int8_linear",
                format!("bias has {} entries for {outputs} outputs", bias.len()),
            ));
        }
        let requant = Requantizer::from_scales(input, weight.qparams(), output)?;
        Ok(Self {
            centered: weight.centered(),
            weight,
            bias,
            input,
            output,
            requant,
            relu,
        })
    }

    pub fn weight(&self) -> &QuantTensor {
        &self.weight
    }

    pub fn bias(&self) -> &[i32] {
        &self.bias
    }

    pub fn output_qparams(&self) -> QuantParams {
        self.output
    }

    pub fn forward(&self, x: &QuantTensor) -> Result<QuantTensor> {
        let (outputs, inputs) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.shape().len() != 2 || x.shape()[1] != inputs {
            return Err(Error::shape(
                "int8_linear",
                format!("input {:?} vs weight {:?}", x.shape(), self.weight.shape()),
            ));
        }
        if x.qparams() != self.input {
            return Err(Error::shape(
                "int8_linear",
                "input quantization parameters differ",
            ));
        }
        let batch = x.shape()[0];
        let xc = x.centered();
        let z_out = self.output.zero_point() as i64;
        let floor = if self.relu { z_out } else { 0 };
        let mut out = vec![0u8; batch * outputs];
        for b in 0..batch {
            let xr = &xc[b * inputs..(b + 1) * inputs];
            for o in 0..outputs {
                let acc = dot_i16(xr, &self.centered[o * inputs..(o + 1) * inputs])
                    .saturating_add(self.bias[o]);
                out[b * outputs + o] = requantize(acc, &self.requant, z_out, floor);
            }
        }
        QuantTensor::new(vec![batch, outputs], out, self.output)
    }
}

/// A prepared integer convolution (cross-correlation, square kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Conv2d {
    weight: QuantTensor,
    centered: Vec<i16>,
    bias: Vec<i32>,
    stride: usize,
    pad: usize,
    input: QuantParams,
    output: QuantParams,
    requant: Requantizer,
    relu: bool,
}

impl Int8Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        weight: QuantTensor,
        bias: Vec<i32>,
        stride: usize,
        pad: usize,
        input: QuantParams,
        output: QuantParams,
        relu: bool,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                "int8_conv2d",
                format!("weight {ws:?} is not [F,C,k,k]"),
            ));
        }
        let reduction = ws[1] * ws[2] * ws[3];
        if reduction > MAX_REDUCTION {
            return Err(Error::config(format!(
                "int8_conv2d reduction length {reduction} exceeds {MAX_REDUCTION}"
            )));
        }
        if bias.len() != ws[0] {
            return Err(Error::shape(
                "int8_conv2d",
                format!("bias has {} entries for {} filters", bias.len(), ws[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("int8_conv2d", "stride must be positive"));
        }
        let requant = Requantizer::from_scales(input, weight.qparams(), output)?;
        Ok(Self {
            centered: weight.centered(),
            weight,
            bias,
            stride,
            pad,
            input,
            output,
            requant,
            relu,
        })
    }

    pub fn weight(&self) -> &QuantTensor {
        &self.weight
    }

    pub fn bias(&self) -> &[i32] {
        &self.bias
    }

    pub fn output_qparams(&self) -> QuantParams {
        self.output
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn forward(&self, x: &QuantTensor) -> Result<QuantTensor> {
        let g = ConvGeometry::new(x.shape(), self.weight.shape(), self.stride, self.pad)?;
        if x.qparams() != self.input {
            return Err(Error::shape(
                "int8_conv2d",
                "input quantization parameters differ",
            ));
        }
        let xc = x.centered();
        let in_plane = g.height * g.width;
        let out_plane = g.out_h * g.out_w;
        let z_out = self.output.zero_point() as i64;
        let floor = if self.relu { z_out } else { 0 };
        let mut out = vec![0u8; g.batch * g.filters * out_plane];
        let mut acc = vec![0i32; out_plane];
        for b in 0..g.batch {
            for f in 0..g.filters {
                acc.fill(self.bias[f]);
                for c in 0..g.channels {
                    let xp = &xc[(b * g.channels + c) * in_plane..][..in_plane];
                    for ky in 0..g.kernel {
                        let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
                        for kx in 0..g.kernel {
                            let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                            let wv = self.centered
                                [((f * g.channels + c) * g.kernel + ky) * g.kernel + kx]
                                as i32;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * g.stride + ky - g.pad;
                                let xrow = &xp[iy * g.width..][..g.width];
                                let arow = &mut acc[oy * g.out_w..][..g.out_w];
                                if g.stride == 1 {
                                    let src_lo = ox_lo + kx - g.pad.min(ox_lo + kx);
                                    let src = &xrow[src_lo..src_lo + (ox_hi - ox_lo)];
                                    for (a, &xv) in arow[ox_lo..ox_hi].iter_mut().zip(src) {
                                        *a = a.wrapping_add(wv * xv as i32);
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * g.stride + kx - g.pad;
                                        arow[ox] = arow[ox].wrapping_add(wv * xrow[ix] as i32);
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = &mut out[(b * g.filters + f) * out_plane..][..out_plane];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = requantize(a, &self.requant, z_out, floor);
                }
            }
        }
        QuantTensor::new(g.out_shape(), out, self.output)
    }
}

/// Integer dense layer `x[B×I] · w[O×I]^T + bias` requantized to `out_qp`.
pub fn int8_linear(
    xq: &QuantTensor,
    wq: &QuantTensor,
    bias: &[i32],
    out_qp: QuantParams,
) -> Result<QuantTensor> {
    Int8Linear::new(wq.clone(), bias.to_vec(), xq.qparams(), out_qp, false)?.forward(xq)
}

/// Integer convolution requantized to `out_qp`.
pub fn int8_conv2d(
    xq: &QuantTensor,
    wq: &QuantTensor,
    bias: &[i32],
    stride: usize,
    pad: usize,
    out_qp: QuantParams,
) -> Result<QuantTensor> {
    Int8Conv2d::new(
        wq.clone(),
        bias.to_vec(),
        stride,
        pad,
        xq.qparams(),
        out_qp,
        false,
    )?
    .forward(xq)
}

/// 2x2/stride-2 max pool on codes; valid because the grid is monotone.
pub fn int8_maxpool2(x: &QuantTensor) -> Result<QuantTensor> {
    let shape = crate::ops::maxpool2_shape(x.shape())?;
    let mut out = vec![0u8; shape.iter().product()];
    crate::ops::maxpool2_forward(x.data(), x.shape(), &mut out);
    QuantTensor::new(shape, out, x.qparams())
}

/// Bias in accumulator units: `round_half_even(b / (s_in · s_w))`.
pub fn quantize_bias(bias: &[f32], input: QuantParams, weight: QuantParams) -> Vec<i32> {
    let unit = input.scale() as f64 * weight.scale() as f64;
    bias.iter()
        .map(|&b| {
            (b as f64 / unit)
                .round_ties_even()
                .clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect()
}

/// Real value of an `i32` bias code.
pub fn dequantize_bias(bias: &[i32], input: QuantParams, weight: QuantParams) -> Vec<f32> {
    let unit = input.scale() as f64 * weight.scale() as f64;
    bias.iter().map(|&b| (b as f64 * unit) as f32).collect()
}
