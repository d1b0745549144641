//! Unsigned affine INT8 quantization: calibration, fake-quant training,
//! integer inference and size/noise accounting.

pub mod accounting;
pub mod affine;
pub mod convert;
pub mod fake;
pub mod int8;
pub mod qat;

pub use accounting::{compression_estimate, quant_noise_bound};
pub use affine::{
    dequantize, quantize, quantize_weight, weight_qparams, Observer, ObserverMode, QuantParams,
};
pub use convert::{calibrate_minmax, convert_to_int8, IntLayer, IntNetwork};
pub use fake::{fake_quant_forward, ste_backward, FakeQuantNode};
pub use int8::{
    int8_conv2d, int8_linear, int8_maxpool2, quantize_bias, Int8Conv2d, Int8Linear, QuantTensor,
    Requantizer,
};
pub use qat::QatState;
