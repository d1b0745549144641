//! The two reference classifiers and their forward passes.
//!
//! Parameters are stored as `[w0, b0, w1, b1, ...]`, one weight/bias pair per
//! conv or linear layer. The `s`-th such layer is "site" `s`: its weight is
//! the `s`-th maskable tensor and its output is the `s`-th activation
//! quantization point.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Parameter, Tape};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, LinearGeometry};
use crate::quant::affine::{weight_qparams, QuantParams};
use crate::quant::fake::{fake_quant_slice, fake_quant_weight_slice, FakeQuantNode};
use crate::quant::qat::QatState;
use crate::rng::substream;
use crate::tensor::DenseTensor;

pub const MLP_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// `Flatten → Linear(I→hidden) → ReLU → Linear(hidden→K)`.
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
    /// `conv 3×3 C→16, ReLU, pool, conv 3×3 16→32, ReLU, pool, linear→K`.
    SmallConv {
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    Linear {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }
}

impl Arch {
    pub fn mlp(inputs: usize, classes: usize) -> Self {
        Arch::Mlp {
            inputs,
            hidden: MLP_HIDDEN,
            classes,
        }
    }

    pub fn small_conv(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Arch::SmallConv {
            channels,
            height,
            width,
            classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Mlp { .. } => "mlp",
            Arch::SmallConv { .. } => "smallconv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                if inputs == 0 || hidden == 0 || classes < 2 {
                    return Err(Error::config(format!(
                        "invalid mlp {inputs}→{hidden}→{classes}"
                    )));
                }
            }
            Arch::SmallConv {
                channels,
                height,
                width,
                classes,
            } => {
                if channels == 0 || classes < 2 {
                    return Err(Error::config(
                        "smallconv needs channels > 0 and at least 2 classes",
                    ));
                }
                if height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::config(format!(
                        "smallconv input {height}x{width} must be a positive multiple of 4"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            Arch::Mlp { inputs, .. } => vec![inputs],
            Arch::SmallConv {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Arch::Mlp { classes, .. } | Arch::SmallConv { classes, .. } => classes,
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        match *self {
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => vec![
                Layer::Flatten,
                Layer::Linear {
                    inputs,
                    outputs: hidden,
                    relu: true,
                },
                Layer::Linear {
                    inputs: hidden,
                    outputs: classes,
                    relu: false,
                },
            ],
            Arch::SmallConv {
                channels,
                height,
                width,
                classes,
            } => {
                let conv = |in_ch, out_ch| Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    relu: true,
                };
                vec![
                    conv(channels, 16),
                    Layer::MaxPool2,
                    conv(16, 32),
                    Layer::MaxPool2,
                    Layer::Flatten,
                    Layer::Linear {
                        inputs: 32 * (height / 4) * (width / 4),
                        outputs: classes,
                        relu: false,
                    },
                ]
            }
        }
    }

    /// Shapes of `[w0, b0, w1, b1, ...]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for layer in self.layers() {
            match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    shapes.push(vec![out_ch, in_ch, kernel, kernel]);
                    shapes.push(vec![out_ch]);
                }
                Layer::Linear {
                    inputs, outputs, ..
                } => {
                    shapes.push(vec![outputs, inputs]);
                    shapes.push(vec![outputs]);
                }
                Layer::MaxPool2 | Layer::Flatten => {}
            }
        }
        shapes
    }

    pub fn num_sites(&self) -> usize {
        self.layers().iter().filter(|l| l.is_weighted()).count()
    }

    /// Total number of maskable (weight) entries.
    pub fn num_weights(&self) -> usize {
        self.param_shapes()
            .iter()
            .step_by(2)
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Multiply-accumulates of one forward pass per sample, by site.
    pub fn macs_per_sample(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let (mut h, mut w) = match *self {
            Arch::SmallConv { height, width, .. } => (height, width),
            Arch::Mlp { .. } => (1, 1),
        };
        for layer in self.layers() {
            match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => out.push((in_ch * out_ch * kernel * kernel * h * w) as u64),
                Layer::Linear {
                    inputs, outputs, ..
                } => out.push((inputs * outputs) as u64),
                Layer::MaxPool2 => {
                    h /= 2;
                    w /= 2;
                }
                Layer::Flatten => {}
            }
        }
        out
    }
}

/// Anything that maps a batch of inputs to `[B×K]` logits.
pub trait Classifier {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor>;
    fn num_classes(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Arch,
    params: Vec<Parameter>,
}

enum Activations<'a> {
    Float,
    FakeQuant {
        input: QuantParams,
        sites: &'a [QuantParams],
    },
}

impl Network {
    /// Kaiming-uniform weights (`±sqrt(6/fan_in)`), zero biases, drawn from
    /// the `"init"` sub-stream of `seed`.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = Vec::new();
        for (i, shape) in arch.param_shapes().into_iter().enumerate() {
            let numel: usize = shape.iter().product();
            let data = if i % 2 == 0 {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..numel)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            } else {
                vec![0.0; numel]
            };
            params.push(Parameter::new(DenseTensor::new(shape, data)?));
        }
        Ok(Self { arch, params })
    }

    pub fn from_values(arch: Arch, values: Vec<DenseTensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if values.len() != shapes.len() {
            return Err(Error::shape(
                "network",
                format!(
                    "{} parameters for an architecture with {}",
                    values.len(),
                    shapes.len()
                ),
            ));
        }
        for (i, (v, s)) in values.iter().zip(&shapes).enumerate() {
            if v.shape() != s.as_slice() {
                return Err(Error::shape(
                    "network",
                    format!("parameter {i} has shape {:?}, expected {s:?}", v.shape()),
                ));
            }
        }
        Ok(Self {
            arch,
            params: values.into_iter().map(Parameter::new).collect(),
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_sites(&self) -> usize {
        self.params.len() / 2
    }

    pub fn weight(&self, site: usize) -> &DenseTensor {
        self.params[2 * site].value()
    }

    pub fn bias(&self, site: usize) -> &DenseTensor {
        self.params[2 * site + 1].value()
    }

    /// Maskable tensors in site order.
    pub fn weights(&self) -> Vec<&DenseTensor> {
        self.params.iter().step_by(2).map(|p| p.value()).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.params
            .iter_mut()
            .step_by(2)
            .map(|p| p.value_mut())
            .collect()
    }

    pub fn num_weights(&self) -> usize {
        self.weights().iter().map(|w| w.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn batch_shape(&self, x: &DenseTensor) -> Result<Vec<usize>> {
        let per = self.arch.input_len();
        if !x.len().is_multiple_of(per) || x.shape()[0] * per != x.len() {
            return Err(Error::shape(
                "network",
                format!(
                    "input {:?} does not hold samples of {:?}",
                    x.shape(),
                    self.arch.input_shape()
                ),
            ));
        }
        let mut shape = vec![x.shape()[0]];
        shape.extend(self.arch.input_shape());
        Ok(shape)
    }

    /// Records the forward pass on `tape` and returns the logits node.
    ///
    /// With an enabled `quant` state, the input, every weight and every
    /// conv/linear output are fake-quantized; activation observers are
    /// updated with the batch before their parameters are read.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: &DenseTensor,
        quant: Option<&mut QatState>,
    ) -> Result<NodeId> {
        let shape = self.batch_shape(x)?;
        let mut quant = quant.filter(|q| q.enabled());
        if let Some(q) = &quant {
            if q.num_sites() != self.num_sites() {
                return Err(Error::shape(
                    "network",
                    format!(
                        "{} quantization sites for {} layers",
                        q.num_sites(),
                        self.num_sites()
                    ),
                ));
            }
        }
        let mut h = tape.input(x.clone().reshape(shape)?);
        if let Some(q) = &quant {
            h = tape.fake_quant(h, FakeQuantNode::new(q.input_qparams()));
        }
        let mut site = 0;
        for layer in self.arch.layers() {
            h = match layer {
                Layer::Conv {
                    stride, pad, relu, ..
                } => {
                    let (w, b) = self.site_nodes(tape, site, quant.is_some());
                    let out = tape.conv2d(h, w, Some(b), stride, pad)?;
                    self.finish_site(tape, out, relu, site, quant.as_deref_mut())?
                }
                Layer::Linear { relu, .. } => {
                    let (w, b) = self.site_nodes(tape, site, quant.is_some());
                    let out = tape.linear(h, w, Some(b))?;
                    self.finish_site(tape, out, relu, site, quant.as_deref_mut())?
                }
                Layer::MaxPool2 => tape.maxpool2(h)?,
                Layer::Flatten => tape.flatten(h)?,
            };
            if layer.is_weighted() {
                site += 1;
            }
        }
        Ok(h)
    }

    fn site_nodes(&self, tape: &mut Tape, site: usize, quant: bool) -> (NodeId, NodeId) {
        let wi = 2 * site;
        let mut w = tape.param(wi, &self.params[wi]);
        if quant {
            let qp = weight_qparams(self.params[wi].value().data())
                .expect("weight range is always representable");
            w = tape.fake_quant_weight(w, qp);
        }
        let b = tape.param(wi + 1, &self.params[wi + 1]);
        (w, b)
    }

    fn finish_site(
        &self,
        tape: &mut Tape,
        out: NodeId,
        relu: bool,
        site: usize,
        quant: Option<&mut QatState>,
    ) -> Result<NodeId> {
        let mut h = if relu { tape.relu(out) } else { out };
        if let Some(q) = quant {
            q.observe(site, tape.value(h).data());
            let qp = q.site_qparams(site)?;
            h = tape.fake_quant(h, FakeQuantNode::new(qp));
        }
        Ok(h)
    }

    /// FP32 inference.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let weights: Vec<&DenseTensor> = self.weights();
        self.eval_parallel(x, &weights, &Activations::Float)
    }

    /// Runs the FP32 network over `batches` and feeds every site's output
    /// to the corresponding observer of `quant`, without training.
    pub fn observe_activations(&self, batches: &[DenseTensor], quant: &mut QatState) -> Result<()> {
        if quant.num_sites() != self.num_sites() {
            return Err(Error::shape(
                "network",
                "observer count differs from site count",
            ));
        }
        let weights = self.weights();
        for x in batches {
            self.eval_serial(x, &weights, &Activations::Float, &mut |site, v| {
                quant.observe(site, v)
            })?;
        }
        Ok(())
    }

    fn eval_parallel(
        &self,
        x: &DenseTensor,
        weights: &[&DenseTensor],
        acts: &Activations,
    ) -> Result<DenseTensor> {
        self.batch_shape(x)?;
        let flat = DenseTensor::new(vec![x.shape()[0], self.arch.input_len()], x.data().to_vec())?;
        eval_in_chunks(&flat, self.arch.num_classes(), |xs| {
            self.eval_serial(xs, weights, acts, &mut |_, _| {})
        })
    }

    fn eval_serial(
        &self,
        x: &DenseTensor,
        weights: &[&DenseTensor],
        acts: &Activations,
        observe: &mut dyn FnMut(usize, &[f32]),
    ) -> Result<DenseTensor> {
        let mut shape = self.batch_shape(x)?;
        let mut cur = x.data().to_vec();
        if let Activations::FakeQuant { input, .. } = acts {
            let src = cur.clone();
            fake_quant_slice(&src, *input, &mut cur);
        }
        let mut site = 0;
        for layer in self.arch.layers() {
            match layer {
                Layer::Conv {
                    stride, pad, relu, ..
                } => {
                    let w = weights[site];
                    let g = ConvGeometry::new(&shape, w.shape(), stride, pad)?;
                    shape = g.out_shape();
                    let mut out = vec![0.0; shape.iter().product()];
                    ops::conv2d_forward(&cur, w.data(), Some(self.bias(site).data()), &g, &mut out);
                    cur = self.finish_eval(out, relu, site, acts, observe);
                    site += 1;
                }
                Layer::Linear { relu, .. } => {
                    let w = weights[site];
                    let g = LinearGeometry::new(&shape, w.shape(), Some(self.bias(site).len()))?;
                    shape = vec![g.batch, g.outputs];
                    let mut out = vec![0.0; g.batch * g.outputs];
                    ops::linear_forward(&cur, w.data(), Some(self.bias(site).data()), g, &mut out);
                    cur = self.finish_eval(out, relu, site, acts, observe);
                    site += 1;
                }
                Layer::MaxPool2 => {
                    let out_shape = ops::maxpool2_shape(&shape)?;
                    let mut out = vec![0.0; out_shape.iter().product()];
                    ops::maxpool2_forward(&cur, &shape, &mut out);
                    shape = out_shape;
                    cur = out;
                }
                Layer::Flatten => {
                    let rows = shape[0];
                    shape = vec![rows, cur.len() / rows];
                }
            }
        }
        DenseTensor::new(shape, cur)
    }

    fn finish_eval(
        &self,
        mut out: Vec<f32>,
        relu: bool,
        site: usize,
        acts: &Activations,
        observe: &mut dyn FnMut(usize, &[f32]),
    ) -> Vec<f32> {
        if relu {
            for v in out.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        observe(site, &out);
        if let Activations::FakeQuant { sites, .. } = acts {
            let src = out.clone();
            fake_quant_slice(&src, sites[site], &mut out);
        }
        out
    }
}

/// Samples per inference chunk; keeps every layer's activations cache
/// resident.
const INFER_CHUNK: usize = 4;

/// Applies `f` to row chunks of the `[N, D]` input in parallel and
/// concatenates the `[n, classes]` results in order. Rows are independent,
/// so the output does not depend on the chunking.
pub(crate) fn eval_in_chunks<F>(x: &DenseTensor, classes: usize, f: F) -> Result<DenseTensor>
where
    F: Fn(&DenseTensor) -> Result<DenseTensor> + Sync,
{
    let batch = x.shape()[0];
    let per = x.len() / batch.max(1);
    let threads = rayon::current_num_threads().max(1);
    let chunk = batch.div_ceil(threads).clamp(1, INFER_CHUNK);
    if batch <= chunk {
        return f(x);
    }
    let parts: Vec<Result<DenseTensor>> = x
        .data()
        .par_chunks(chunk * per)
        .map(|c| f(&DenseTensor::new(vec![c.len() / per, per], c.to_vec())?))
        .collect();
    let mut data = Vec::with_capacity(batch * classes);
    for p in parts {
        data.extend_from_slice(p?.data());
    }
    DenseTensor::new(vec![batch, classes], data)
}

impl Classifier for Network {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.forward(x)
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }
}

/// Float simulation of the quantized network: fake-quantized weights and
/// activations with frozen parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantModel {
    net: Network,
    weights: Vec<DenseTensor>,
    input: QuantParams,
    sites: Vec<QuantParams>,
}

impl FakeQuantModel {
    pub fn new(net: &Network, quant: &QatState) -> Result<Self> {
        let sites = quant.activation_qparams()?;
        if sites.len() != net.num_sites() {
            return Err(Error::shape(
                "fake_quant_model",
                "observer count differs from site count",
            ));
        }
        let weights = net
            .weights()
            .into_iter()
            .map(|w| {
                let qp = weight_qparams(w.data())?;
                let mut out = w.clone();
                fake_quant_weight_slice(w.data(), qp, out.data_mut());
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            net: net.clone(),
            weights,
            input: quant.input_qparams(),
            sites,
        })
    }

    /// The fake-quantized weights, i.e. the values on each weight grid.
    pub fn weights(&self) -> &[DenseTensor] {
        &self.weights
    }
}

impl Classifier for FakeQuantModel {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let weights: Vec<&DenseTensor> = self.weights.iter().collect();
        let acts = Activations::FakeQuant {
            input: self.input,
            sites: &self.sites,
        };
        self.net.eval_parallel(x, &weights, &acts)
    }

    fn num_classes(&self) -> usize {
        self.net.arch.num_classes()
    }
}
