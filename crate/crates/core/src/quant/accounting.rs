//! Closed-form size and noise estimates.

use crate::error::{Error, Result};

/// Multiplicative size reduction from sparsity and bit-width:
/// `(bits_from / bits_to) / (1 − rho)`.
pub fn compression_estimate(rho: f64, bits_from: u32, bits_to: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::config(format!("sparsity {rho} outside [0, 1)")));
    }
    if bits_from == 0 || bits_to == 0 {
        return Err(Error::config("bit widths must be positive"));
    }
    Ok(bits_from as f64 / bits_to as f64 / (1.0 - rho))
}

/// Expected squared rounding error `Δ²/12 · n` over `n` active weights under
/// the uniform error model.
pub fn quant_noise_bound(active_count: usize, delta: f64) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::config(format!(
            "step size must be positive, got {delta}"
        )));
    }
    Ok(delta * delta / 12.0 * active_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_reference_values() {
        assert_eq!(compression_estimate(0.5, 32, 8).unwrap(), 8.0);
        assert_eq!(compression_estimate(0.0, 32, 8).unwrap(), 4.0);
        assert!(compression_estimate(1.0, 32, 8).is_err());
        assert!(compression_estimate(-0.1, 32, 8).is_err());
    }

    #[test]
    fn noise_bound_reference_values() {
        assert_eq!(quant_noise_bound(0, 0.3).unwrap(), 0.0);
        assert_eq!(quant_noise_bound(12, 1.0).unwrap(), 1.0);
        assert!(quant_noise_bound(3, 0.0).is_err());
    }
}
