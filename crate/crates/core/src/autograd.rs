//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive in execution order, so the node list is
//! already topologically sorted and the backward pass is a single reverse
//! sweep. Parameters live outside the tape; a parameter leaf stores the
//! index of its [`Parameter`] and `backward` accumulates into that slot.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, LinearGeometry};
use crate::quant::affine::QuantParams;
use crate::quant::fake::{fake_quant_slice, fake_quant_weight_slice, FakeQuantNode};
use crate::tensor::DenseTensor;

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    value: DenseTensor,
    grad: DenseTensor,
    trainable: bool,
    populated: bool,
}

impl Parameter {
    pub fn new(value: DenseTensor) -> Self {
        let grad = DenseTensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
            populated: false,
        }
    }

    /// A parameter that never receives gradient.
    pub fn frozen(value: DenseTensor) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn value(&self) -> &DenseTensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut DenseTensor {
        &mut self.value
    }

    pub fn grad(&self) -> &DenseTensor {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Whether a backward pass has written a gradient since the last reset.
    pub fn has_grad(&self) -> bool {
        self.populated
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
        self.populated = false;
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [f32] {
        self.populated = true;
        self.grad.data_mut()
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.value.data_mut(), self.grad.data_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        g: LinearGeometry,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        g: ConvGeometry,
    },
    Relu(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Reshape(NodeId),
    FakeQuant {
        x: NodeId,
        qparams: QuantParams,
    },
    Sum(NodeId),
    Square(NodeId),
    /// A scalar loss whose gradient with respect to `input` was computed
    /// during the forward pass.
    Loss {
        input: NodeId,
        grad: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input; never differentiated.
    pub fn input(&mut self, value: DenseTensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf for `params[index]`; `backward` must receive the same slice.
    pub fn param(&mut self, index: usize, p: &Parameter) -> NodeId {
        self.push(p.value.clone(), Op::Param(index), p.trainable)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let g = LinearGeometry::new(
            self.value(x).shape(),
            self.value(w).shape(),
            b.map(|b| self.value(b).len()),
        )?;
        let mut out = vec![0.0f32; g.batch * g.outputs];
        ops::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            g,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = DenseTensor::new(vec![g.batch, g.outputs], out)?;
        Ok(self.push(value, Op::Linear { x, w, b, g }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let g = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).len() != g.filters {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias has {} entries for {} filters",
                        self.value(b).len(),
                        g.filters
                    ),
                ));
            }
        }
        let shape = g.out_shape();
        let mut out = vec![0.0f32; shape.iter().product()];
        ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &g,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = DenseTensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let mut out = DenseTensor::zeros(src.shape());
        ops::relu_forward(src.data(), out.data_mut());
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        let shape = ops::maxpool2_shape(src.shape())?;
        let mut out = vec![0.0f32; shape.iter().product()];
        let argmax = ops::maxpool2_forward(src.data(), src.shape(), &mut out);
        let rg = self.rg(x);
        let value = DenseTensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).rows_cols();
        self.reshape(x, vec![rows, cols])
    }

    /// Activation fake-quant with clipped STE. A disabled node records
    /// nothing and returns `x` itself.
    pub fn fake_quant(&mut self, x: NodeId, node: FakeQuantNode) -> NodeId {
        if !node.enabled {
            return x;
        }
        let src = self.value(x);
        let mut out = DenseTensor::zeros(src.shape());
        fake_quant_slice(src.data(), node.qparams, out.data_mut());
        let rg = self.rg(x);
        self.push(
            out,
            Op::FakeQuant {
                x,
                qparams: node.qparams,
            },
            rg,
        )
    }

    /// Weight fake-quant: like [`Tape::fake_quant`] but with the weight
    /// quantizer, which keeps nonzero weights off the zero code.
    pub fn fake_quant_weight(&mut self, x: NodeId, qparams: QuantParams) -> NodeId {
        let src = self.value(x);
        let mut out = DenseTensor::zeros(src.shape());
        fake_quant_weight_slice(src.data(), qparams, out.data_mut());
        let rg = self.rg(x);
        self.push(out, Op::FakeQuant { x, qparams }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(DenseTensor::scalar(total as f32), Op::Sum(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * v).collect();
        let value = DenseTensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    /// Mean cross-entropy of `[B×K]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.shape().len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} are not 2-d", v.shape()),
            ));
        }
        let (loss, grad) = ops::cross_entropy(v.data(), v.shape()[1], labels)?;
        self.loss(logits, loss, grad)
    }

    /// Records a scalar loss together with its gradient w.r.t. `input`.
    pub fn loss(&mut self, input: NodeId, value: f32, grad: Vec<f32>) -> Result<NodeId> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape(
                "loss",
                format!(
                    "{} gradient entries for {} inputs",
                    grad.len(),
                    self.value(input).len()
                ),
            ));
        }
        let rg = self.rg(input);
        Ok(self.push(DenseTensor::scalar(value), Op::Loss { input, grad }, rg))
    }

    /// Reverse sweep from the scalar `loss`, accumulating into `params`.
    /// The tape is cleared afterwards.
    pub fn backward(&mut self, loss: NodeId, params: &mut [Parameter]) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        fn slot(grads: &mut [Option<Vec<f32>>], id: NodeId, len: usize) -> &mut [f32] {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let val = |id: NodeId| &nodes[id.0].value;
            let need = |id: NodeId| nodes[id.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(index) => {
                    let p = params.get_mut(*index).ok_or_else(|| {
                        Error::shape("backward", format!("no parameter at index {index}"))
                    })?;
                    if p.value.shape() != node.value.shape() {
                        return Err(Error::shape(
                            "backward",
                            format!("parameter {index} changed shape since the forward pass"),
                        ));
                    }
                    for (g, d) in p.grad_mut().iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Linear { x, w, b, g } => {
                    let mut dx = need(*x).then(|| vec![0.0; val(*x).len()]);
                    let mut dw = need(*w).then(|| vec![0.0; val(*w).len()]);
                    let mut db = b.filter(|b| need(*b)).map(|b| vec![0.0; val(b).len()]);
                    ops::linear_backward(
                        val(*x).data(),
                        val(*w).data(),
                        &dy,
                        *g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    add_into(&mut grads, *x, dx);
                    add_into(&mut grads, *w, dw);
                    if let Some(b) = b {
                        add_into(&mut grads, *b, db);
                    }
                }
                Op::Conv2d { x, w, b, g } => {
                    let mut dx = need(*x).then(|| vec![0.0; val(*x).len()]);
                    let mut dw = need(*w).then(|| vec![0.0; val(*w).len()]);
                    let mut db = b.filter(|b| need(*b)).map(|b| vec![0.0; val(b).len()]);
                    ops::conv2d_backward(
                        val(*x).data(),
                        val(*w).data(),
                        &dy,
                        g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    add_into(&mut grads, *x, dx);
                    add_into(&mut grads, *w, dw);
                    if let Some(b) = b {
                        add_into(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let dst = slot(&mut grads, *x, val(*x).len());
                    ops::relu_backward(val(*x).data(), &dy, dst);
                }
                Op::MaxPool2 { x, argmax } => {
                    let dst = slot(&mut grads, *x, val(*x).len());
                    ops::maxpool2_backward(argmax, &dy, dst);
                }
                Op::Reshape(x) => {
                    let dst = slot(&mut grads, *x, val(*x).len());
                    for (d, g) in dst.iter_mut().zip(&dy) {
                        *d += g;
                    }
                }
                Op::FakeQuant { x, qparams } => {
                    let src = val(*x).data();
                    let dst = slot(&mut grads, *x, src.len());
                    for ((d, g), &v) in dst.iter_mut().zip(&dy).zip(src) {
                        if qparams.in_range(v) {
                            *d += g;
                        }
                    }
                }
                Op::Sum(x) => {
                    let dst = slot(&mut grads, *x, val(*x).len());
                    for d in dst.iter_mut() {
                        *d += dy[0];
                    }
                }
                Op::Square(x) => {
                    let src = val(*x).data();
                    let dst = slot(&mut grads, *x, src.len());
                    for ((d, g), &v) in dst.iter_mut().zip(&dy).zip(src) {
                        *d += 2.0 * v * g;
                    }
                }
                Op::Loss { input, grad } => {
                    let dst = slot(&mut grads, *input, grad.len());
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += dy[0] * g;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f32>>], id: NodeId, g: Option<Vec<f32>>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        empty => *empty = Some(g),
    }
}
