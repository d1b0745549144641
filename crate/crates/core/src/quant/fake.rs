//! Quantize-dequantize ("fake-quant") for training on the INT8 grid, with a
//! clipped straight-through estimator for the backward pass.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

use super::affine::{dequantize, quantize, quantize_weight, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuantNode {
    pub qparams: QuantParams,
    pub enabled: bool,
}

impl FakeQuantNode {
    pub fn new(qparams: QuantParams) -> Self {
        Self {
            qparams,
            enabled: true,
        }
    }

    pub fn disabled(qparams: QuantParams) -> Self {
        Self {
            qparams,
            enabled: false,
        }
    }
}

pub fn fake_quant_slice(x: &[f32], qp: QuantParams, out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = dequantize(quantize(v, qp), qp);
    }
}

/// Fake-quant with the weight quantizer (nonzero values never collapse to 0).
pub fn fake_quant_weight_slice(x: &[f32], qp: QuantParams, out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = dequantize(quantize_weight(v, qp), qp);
    }
}

/// `dequantize(quantize(x))` elementwise; identity when the node is disabled.
pub fn fake_quant_forward(x: &DenseTensor, node: &FakeQuantNode) -> DenseTensor {
    if !node.enabled {
        return x.clone();
    }
    let mut out = x.clone();
    fake_quant_slice(x.data(), node.qparams, out.data_mut());
    out
}

/// Clipped STE: upstream gradient where `x/s + z ∈ [0, 255]`, zero elsewhere.
pub fn ste_backward(
    upstream: &DenseTensor,
    x: &DenseTensor,
    node: &FakeQuantNode,
) -> Result<DenseTensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(
            "ste_backward",
            format!("gradient {:?} vs input {:?}", upstream.shape(), x.shape()),
        ));
    }
    let mut out = upstream.clone();
    if node.enabled {
        for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
            if !node.qparams.in_range(v) {
                *g = 0.0;
            }
        }
    }
    Ok(out)
}
