//! Conversion of a float network into an integer-only one, and min/max
//! calibration for post-training quantization.

use crate::error::{Error, Result};
use crate::nn::{eval_in_chunks, Arch, Classifier, Layer, Network};
use crate::tensor::DenseTensor;

use super::affine::{weight_qparams, ObserverMode, QuantParams};
use super::int8::{
    dequantize_bias, int8_maxpool2, quantize_bias, Int8Conv2d, Int8Linear, QuantTensor,
};
use super::qat::{input_qparams, QatState};

#[derive(Debug, Clone, PartialEq)]
pub enum IntLayer {
    Conv(Int8Conv2d),
    Linear(Int8Linear),
    MaxPool2,
    Flatten,
}

/// A network whose inference runs on `u8` codes and `i32` accumulators.
/// Only the input quantization and the final logit dequantization touch
/// floats.
#[derive(Debug, Clone, PartialEq)]
pub struct IntNetwork {
    arch: Arch,
    input: QuantParams,
    layers: Vec<IntLayer>,
}

/// Per-tensor min/max activation parameters from a float forward pass over
/// `batches` (post-training quantization).
pub fn calibrate_minmax(net: &Network, batches: &[DenseTensor]) -> Result<Vec<QuantParams>> {
    if batches.is_empty() {
        return Err(Error::config("calibration needs at least one batch"));
    }
    let mut state = QatState::with_mode(net.num_sites(), ObserverMode::MinMax);
    net.observe_activations(batches, &mut state)?;
    state.activation_qparams()
}

/// Quantizes weights (fresh min/max, weight quantizer), biases (`i32` in
/// accumulator units) and wires each layer's requantizer from the given
/// activation parameters, one per site.
pub fn convert_to_int8(net: &Network, activations: &[QuantParams]) -> Result<IntNetwork> {
    let weights = net
        .weights()
        .into_iter()
        .map(|w| Ok(QuantTensor::quantize_weights(w, weight_qparams(w.data())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut biases = Vec::with_capacity(net.num_sites());
    let mut input = input_qparams();
    for (site, w) in weights.iter().enumerate() {
        biases.push(quantize_bias(net.bias(site).data(), input, w.qparams()));
        input = *activations.get(site).ok_or_else(|| {
            Error::config(format!(
                "missing activation parameters for site {site} of {}",
                net.num_sites()
            ))
        })?;
    }
    IntNetwork::from_parts(net.arch(), input_qparams(), weights, biases, activations)
}

impl IntNetwork {
    pub fn from_parts(
        arch: Arch,
        input: QuantParams,
        weights: Vec<QuantTensor>,
        biases: Vec<Vec<i32>>,
        activations: &[QuantParams],
    ) -> Result<Self> {
        let sites = arch.num_sites();
        if weights.len() != sites || biases.len() != sites || activations.len() != sites {
            return Err(Error::config(format!(
                "integer network needs {sites} weights, biases and activation parameters, got {}/{}/{}",
                weights.len(),
                biases.len(),
                activations.len()
            )));
        }
        let shapes = arch.param_shapes();
        let mut weights = weights.into_iter();
        let mut biases = biases.into_iter();
        let mut layers = Vec::new();
        let mut site = 0;
        let mut cur_in = input;
        for layer in arch.layers() {
            match layer {
                Layer::Conv {
                    stride, pad, relu, ..
                } => {
                    let w = weights.next().expect("counted");
                    check_shape(&w, &shapes[2 * site], site)?;
                    let l = Int8Conv2d::new(
                        w,
                        biases.next().expect("counted"),
                        stride,
                        pad,
                        cur_in,
                        activations[site],
                        relu,
                    )?;
                    layers.push(IntLayer::Conv(l));
                    cur_in = activations[site];
                    site += 1;
                }
                Layer::Linear { relu, .. } => {
                    let w = weights.next().expect("counted");
                    check_shape(&w, &shapes[2 * site], site)?;
                    let l = Int8Linear::new(
                        w,
                        biases.next().expect("counted"),
                        cur_in,
                        activations[site],
                        relu,
                    )?;
                    layers.push(IntLayer::Linear(l));
                    cur_in = activations[site];
                    site += 1;
                }
                Layer::MaxPool2 => layers.push(IntLayer::MaxPool2),
                Layer::Flatten => layers.push(IntLayer::Flatten),
            }
        }
        Ok(Self {
            arch,
            input,
            layers,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_qparams(&self) -> QuantParams {
        self.input
    }

    pub fn layers(&self) -> &[IntLayer] {
        &self.layers
    }

    pub fn weights(&self) -> Vec<&QuantTensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                IntLayer::Conv(c) => Some(c.weight()),
                IntLayer::Linear(f) => Some(f.weight()),
                _ => None,
            })
            .collect()
    }

    pub fn biases(&self) -> Vec<&[i32]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                IntLayer::Conv(c) => Some(c.bias()),
                IntLayer::Linear(f) => Some(f.bias()),
                _ => None,
            })
            .collect()
    }

    pub fn activation_qparams(&self) -> Vec<QuantParams> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                IntLayer::Conv(c) => Some(c.output_qparams()),
                IntLayer::Linear(f) => Some(f.output_qparams()),
                _ => None,
            })
            .collect()
    }

    /// Float network holding the dequantized weights and biases; used to
    /// resume training on the integer grid.
    pub fn to_float(&self) -> Result<Network> {
        let acts = self.activation_qparams();
        let mut values = Vec::new();
        let mut input = self.input;
        for ((w, b), out) in self.weights().into_iter().zip(self.biases()).zip(acts) {
            values.push(w.dequantize());
            let bias = dequantize_bias(b, input, w.qparams());
            values.push(DenseTensor::new(vec![bias.len()], bias)?);
            input = out;
        }
        Network::from_values(self.arch, values)
    }

    /// Codes of the final layer for a float input batch.
    pub fn forward_codes(&self, x: &DenseTensor) -> Result<QuantTensor> {
        let per = self.arch.input_len();
        if !x.len().is_multiple_of(per) || x.shape()[0] * per != x.len() {
            return Err(Error::shape(
                "int_network",
                format!(
                    "input {:?} does not hold samples of {:?}",
                    x.shape(),
                    self.arch.input_shape()
                ),
            ));
        }
        let mut shape = vec![x.shape()[0]];
        shape.extend(self.arch.input_shape());
        let xq = QuantTensor::quantize(&x.clone().reshape(shape)?, self.input);
        let mut cur = xq;
        for layer in &self.layers {
            cur = match layer {
                IntLayer::Conv(c) => c.forward(&cur)?,
                IntLayer::Linear(f) => f.forward(&cur)?,
                IntLayer::MaxPool2 => int8_maxpool2(&cur)?,
                IntLayer::Flatten => {
                    let rows = cur.shape()[0];
                    let cols = cur.len() / rows;
                    cur.reshape(vec![rows, cols])?
                }
            };
        }
        Ok(cur)
    }
}

fn check_shape(w: &QuantTensor, expected: &[usize], site: usize) -> Result<()> {
    if w.shape() != expected {
        return Err(Error::shape(
            "int_network",
            format!("site {site} weight {:?}, expected {expected:?}", w.shape()),
        ));
    }
    Ok(())
}

impl Classifier for IntNetwork {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        if x.shape().is_empty() || x.shape()[0] == 0 {
            return Err(Error::shape(
                "int8 network",
                format!("bad input shape {:?}", x.shape()),
            ));
        }
        let flat = DenseTensor::new(
            vec![x.shape()[0], x.len() / x.shape()[0]],
            x.data().to_vec(),
        )?;
        eval_in_chunks(&flat, self.num_classes(), |xs| {
            Ok(self.forward_codes(xs)?.dequantize())
        })
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FakeQuantModel;

    fn batch(n: usize, seed: usize) -> DenseTensor {
        DenseTensor::new(
            vec![n, 3, 8, 8],
            (0..n * 192)
                .map(|i| ((i * 31 + seed * 7) % 256) as f32 / 255.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn converted_weights_match_fake_quant_grid() {
        let net = Network::new(Arch::small_conv(3, 8, 8, 4), 4).unwrap();
        let acts = calibrate_minmax(&net, &[batch(4, 0), batch(4, 1)]).unwrap();
        let int = convert_to_int8(&net, &acts).unwrap();
        let sim = FakeQuantModel::new(&net, &QatState::seeded(input_qparams(), &acts)).unwrap();
        for (q, f) in int.weights().iter().zip(sim.weights()) {
            assert_eq!(&q.dequantize(), f);
        }
    }

    #[test]
    fn missing_activation_parameters_rejected() {
        let net = Network::new(Arch::mlp(4, 3), 0).unwrap();
        assert!(convert_to_int8(&net, &[QuantParams::new(0.1, 0).unwrap()]).is_err());
        assert!(calibrate_minmax(&net, &[]).is_err());
    }

    #[test]
    fn integer_logits_track_fake_quant_logits() {
        let net = Network::new(Arch::small_conv(3, 8, 8, 4), 9).unwrap();
        let x = batch(8, 3);
        let acts = calibrate_minmax(&net, std::slice::from_ref(&x)).unwrap();
        let int = convert_to_int8(&net, &acts).unwrap();
        let sim = FakeQuantModel::new(&net, &QatState::seeded(input_qparams(), &acts)).unwrap();
        let a = int.logits(&x).unwrap();
        let b = sim.logits(&x).unwrap();
        let step = acts.last().unwrap().scale();
        let worst = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0f32, f32::max);
        // a few output steps of drift from per-layer rounding differences
        assert!(worst <= 4.0 * step, "worst {worst} vs step {step}");
    }

    #[test]
    fn float_view_round_trips_through_conversion() {
        let net = Network::new(Arch::mlp(6, 3), 2).unwrap();
        let x = DenseTensor::new(vec![5, 6], (0..30).map(|i| i as f32 / 30.0).collect()).unwrap();
        let acts = calibrate_minmax(&net, &[x]).unwrap();
        let int = convert_to_int8(&net, &acts).unwrap();
        let again = convert_to_int8(&int.to_float().unwrap(), &acts).unwrap();
        for (a, b) in int.weights().iter().zip(again.weights()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
