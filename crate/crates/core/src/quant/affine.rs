//! Unsigned 8-bit affine quantization: `q = clip(round(x/s) + z, 0, 255)`,
//! `x̂ = s·(q − z)`, with round-half-to-even everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale and zero-point of a per-tensor affine quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f32,
    zero_point: u8,
}

/// Smallest scale ever produced by range calibration.
pub const MIN_SCALE: f32 = 1e-12;

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config(format!(
                "quantization scale must be positive, got {scale}"
            )));
        }
        if !(0..=255).contains(&zero_point) {
            return Err(Error::config(format!(
                "zero point {zero_point} outside [0, 255]"
            )));
        }
        Ok(Self {
            scale,
            zero_point: zero_point as u8,
        })
    }

    /// Parameters covering `[min, max]`, widened to include zero so that an
    /// exact 0.0 (padding, pruned weights, ReLU floor) always maps to `z`.
    ///
    /// A degenerate range (only possible for an all-zero tensor once zero is
    /// included) uses `s = max(|v|, 1)/255` with `z` chosen so `v` is exact.
    pub fn from_range(min: f32, max: f32) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::config(format!(
                "invalid observed range [{min}, {max}]"
            )));
        }
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        if hi == lo {
            return Ok(Self::degenerate(lo));
        }
        let span = hi as f64 - lo as f64;
        let scale = ((span / 255.0) as f32).max(MIN_SCALE);
        let z = (255.0 * -(lo as f64) / span)
            .round_ties_even()
            .clamp(0.0, 255.0);
        Ok(Self {
            scale,
            zero_point: z as u8,
        })
    }

    fn degenerate(value: f32) -> Self {
        let scale = value.abs().max(1.0) / 255.0;
        let steps = (value / scale).round_ties_even();
        let z = (128.0 - steps).clamp(0.0, 255.0);
        Self {
            scale,
            zero_point: z as u8,
        }
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point as i32
    }

    pub fn zero_point_u8(&self) -> u8 {
        self.zero_point
    }

    /// Real interval `[s·(0−z), s·(255−z)]` covered by the grid.
    pub fn representable_range(&self) -> (f32, f32) {
        (
            self.scale * (0 - self.zero_point()) as f32,
            self.scale * (255 - self.zero_point()) as f32,
        )
    }

    pub fn quantize(&self, x: f32) -> u8 {
        quantize(x, *self)
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        dequantize(q, *self)
    }

    /// Whether `x/s + z` lies inside `[0, 255]` before clipping; the
    /// clipped straight-through estimator passes gradient only there.
    pub fn in_range(&self, x: f32) -> bool {
        let v = x / self.scale + self.zero_point as f32;
        (0.0..=255.0).contains(&v)
    }
}

pub fn quantize(x: f32, qp: QuantParams) -> u8 {
    // f64 so the nearest code is found even when x/s is not exact in f32.
    let steps = (x as f64 / qp.scale as f64).round_ties_even();
    if steps.is_nan() {
        return qp.zero_point;
    }
    (steps + qp.zero_point as f64).clamp(0.0, 255.0) as u8
}

pub fn dequantize(q: u8, qp: QuantParams) -> f32 {
    qp.scale * (q as i32 - qp.zero_point as i32) as f32
}

/// Weight quantizer: like [`quantize`], except a nonzero weight never lands
/// on the zero code. It is moved one step toward its sign instead, so the
/// number of nonzero codes equals the number of nonzero (unpruned) weights.
pub fn quantize_weight(x: f32, qp: QuantParams) -> u8 {
    let q = quantize(x, qp);
    if q != qp.zero_point || x == 0.0 || x.is_nan() {
        return q;
    }
    if x > 0.0 && q < 255 {
        q + 1
    } else if x < 0.0 && q > 0 {
        q - 1
    } else {
        q
    }
}

/// Range tracking used to derive [`QuantParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObserverMode {
    /// Running min/max; the range only ever expands.
    MinMax,
    /// Exponential moving average of per-batch min/max.
    Ema { decay: f32 },
}

/// Per-tensor range observer.
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    mode: ObserverMode,
    range: Option<(f32, f32)>,
}

impl Observer {
    pub fn min_max() -> Self {
        Self {
            mode: ObserverMode::MinMax,
            range: None,
        }
    }

    pub fn ema(decay: f32) -> Self {
        Self {
            mode: ObserverMode::Ema { decay },
            range: None,
        }
    }

    /// An observer whose current range is exactly the grid of `qp`.
    pub fn seeded(mode: ObserverMode, qp: QuantParams) -> Self {
        Self {
            mode,
            range: Some(qp.representable_range()),
        }
    }

    pub fn mode(&self) -> ObserverMode {
        self.mode
    }

    pub fn range(&self) -> Option<(f32, f32)> {
        self.range
    }

    /// Folds in one batch of values. Non-finite values are ignored.
    pub fn update(&mut self, values: &[f32]) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in values.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return;
        }
        self.range = Some(match (self.range, self.mode) {
            (None, _) => (lo, hi),
            (Some((min, max)), ObserverMode::MinMax) => (min.min(lo), max.max(hi)),
            (Some((min, max)), ObserverMode::Ema { decay }) => (
                decay * min + (1.0 - decay) * lo,
                decay * max + (1.0 - decay) * hi,
            ),
        });
    }

    pub fn qparams(&self) -> Result<QuantParams> {
        let (lo, hi) = self
            .range
            .ok_or_else(|| Error::config("observer has not seen any values"))?;
        QuantParams::from_range(lo, hi)
    }
}

/// Min/max parameters of a weight tensor, recomputed from scratch.
pub fn weight_qparams(values: &[f32]) -> Result<QuantParams> {
    let mut obs = Observer::min_max();
    obs.update(values);
    match obs.range() {
        Some(_) => obs.qparams(),
        None => QuantParams::from_range(0.0, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(s: f32, z: i32) -> QuantParams {
        QuantParams::new(s, z).unwrap()
    }

    #[test]
    fn quantize_hand_cases() {
        assert_eq!(quantize(3.4, qp(1.0, 0)), 3);
        assert_eq!(quantize(300.0, qp(1.0, 0)), 255);
        assert_eq!(quantize(-1.7, qp(0.5, 10)), 7);
        assert_eq!(quantize(-1e9, qp(0.5, 10)), 0);
        // ties go to even
        assert_eq!(quantize(2.5, qp(1.0, 0)), 2);
        assert_eq!(quantize(3.5, qp(1.0, 0)), 4);
    }

    #[test]
    fn dequantize_hand_cases() {
        assert_eq!(dequantize(10, qp(0.5, 10)), 0.0);
        assert_eq!(dequantize(7, qp(0.5, 10)), -1.5);
        let p = qp(0.25, 100);
        for k in 0..=255u8 {
            let x = dequantize(k, p);
            assert_eq!(quantize(x, p), k);
            assert_eq!(dequantize(quantize(x, p), p), x);
        }
    }

    #[test]
    fn params_validation() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(-1.0, 0).is_err());
        assert!(QuantParams::new(f32::NAN, 0).is_err());
        assert!(QuantParams::new(1.0, 256).is_err());
        assert!(QuantParams::new(1.0, -1).is_err());
    }

    #[test]
    fn from_range_reference_values() {
        let p = QuantParams::from_range(0.0, 255.0).unwrap();
        assert_eq!((p.scale(), p.zero_point()), (1.0, 0));
        let p = QuantParams::from_range(-1.0, 1.0).unwrap();
        assert_eq!(p.scale(), 2.0 / 255.0);
        assert_eq!(p.zero_point(), 128);
    }

    #[test]
    fn degenerate_range_keeps_constant_exact() {
        let p = QuantParams::from_range(0.0, 0.0).unwrap();
        assert_eq!(p.scale(), 1.0 / 255.0);
        assert_eq!(p.zero_point(), 128);
        assert_eq!(dequantize(quantize(0.0, p), p), 0.0);
        // nonzero constants widen to include zero and land on an end code
        for v in [3.0f32, -0.25, 1e-3] {
            let p = QuantParams::from_range(v, v).unwrap();
            let q = quantize(v, p);
            assert!(q == 0 || q == 255);
            assert!((dequantize(q, p) - v).abs() <= v.abs() * 1e-6, "{v}");
        }
    }

    #[test]
    fn weight_quantizer_never_zeroes_nonzero_values() {
        let p = qp(0.1, 128);
        assert_eq!(quantize(0.01, p), 128);
        assert_eq!(quantize_weight(0.01, p), 129);
        assert_eq!(quantize_weight(-0.01, p), 127);
        assert_eq!(quantize_weight(0.0, p), 128);
        assert_eq!(quantize_weight(0.3, p), quantize(0.3, p));
    }

    #[test]
    fn minmax_observer_expands_monotonically() {
        let mut o = Observer::min_max();
        assert!(o.qparams().is_err());
        o.update(&[0.5, 1.0]);
        o.update(&[-2.0, 0.0]);
        o.update(&[0.1]);
        assert_eq!(o.range(), Some((-2.0, 1.0)));
    }

    #[test]
    fn ema_observer_tracks_average() {
        let mut o = Observer::ema(0.5);
        o.update(&[0.0, 2.0]);
        o.update(&[0.0, 4.0]);
        assert_eq!(o.range(), Some((0.0, 3.0)));
        let seeded = Observer::seeded(ObserverMode::MinMax, qp(1.0, 0));
        assert_eq!(seeded.range(), Some((0.0, 255.0)));
    }
}
