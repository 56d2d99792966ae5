//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! the context its adjoint needs. Nodes are append-only; [`Graph::backward`]
//! walks them in reverse once.

use crate::error::{Error, Result};
use crate::ops::{self, Conv2dSpec};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    /// Multiply by a constant `[N,1,H,W]` map broadcast over channels.
    MulPixelConst { input: Var, map: Tensor<T> },
    AddBias { input: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    ChannelStats { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Upsample(Var),
    Softmax { input: Var, axis: usize },
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    CrossEntropy { input: Var, target: Vec<u8> },
    WeightedSum { input: Var, weights: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), spec)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { input, weight, bias, spec }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::ONE - x);
        let rg = self.rg(a);
        self.push(out, Op::OneMinus(a), rg)
    }

    pub fn mul_pixel_const(&mut self, input: Var, map: Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if map.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!("pixel map {:?} does not broadcast to {:?}", map.shape(), [n, c, h, w])));
        }
        let plane = h * w;
        let mut out = self.value(input).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let m = &map.data()[(i / c) * plane..(i / c + 1) * plane];
            for (v, &f) in chunk.iter_mut().zip(m) {
                *v *= f;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::MulPixelConst { input, map }, rg))
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!("bias {:?} != [{c}]", self.value(bias).shape())));
        }
        let plane = h * w;
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { input, bias }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= T::ZERO {
                T::ONE / (T::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::ONE + e)
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn channel_stats(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::channel_stats(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::ChannelStats { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    pub fn upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        if (h, w) == (out_h, out_w) {
            return Ok(input);
        }
        let out = ops::bilinear_upsample(self.value(input), out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Upsample(input), rg))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(input), axis)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Softmax { input, axis }, rg))
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.value(v).shape(),
                    self.value(*first).shape()
                )));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).channels(start, len)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::SliceChannels { input, start }, rg))
    }

    /// Scalar cross-entropy of class probabilities against binary labels.
    pub fn cross_entropy(&mut self, input: Var, target: &[u8]) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(input), target)?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { input, target: target.to_vec() }, rg))
    }

    /// Scalar `sum(input * weights)` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        ensure_same_shape(self.value(input), &weights)?;
        let s = self.value(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, rg))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got {:?}", out_val.shape())));
        }
        if !out_val.all_finite() {
            return Err(Error::NonFinite(format!("output {} is {}", output.0, out_val.data()[0])));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_val.shape().to_vec(), T::ONE));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Conv2d { input, weight, bias, spec } => {
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*weight), *spec, &g, self.rg(*input))?;
                    if let Some(dx) = cg.input {
                        acc(*input, dx);
                    }
                    acc(*weight, cg.weight);
                    if let Some(b) = bias {
                        acc(*b, cg.bias);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, f) => acc(*a, g.map(|x| x * *f)),
                Op::OneMinus(a) => acc(*a, g.map(|x| -x)),
                Op::MulPixelConst { input, map } => {
                    let (_, c, h, w) = g.dims4()?;
                    let plane = h * w;
                    let mut d = g;
                    for (k, chunk) in d.data_mut().chunks_exact_mut(plane).enumerate() {
                        let m = &map.data()[(k / c) * plane..(k / c + 1) * plane];
                        chunk.iter_mut().zip(m).for_each(|(v, &f)| *v *= f);
                    }
                    acc(*input, d);
                }
                Op::AddBias { input, bias } => {
                    let (_, c, h, w) = g.dims4()?;
                    let mut db = Tensor::zeros(vec![c]);
                    for (k, chunk) in g.data().chunks_exact(h * w).enumerate() {
                        db.data_mut()[k % c] += chunk.iter().copied().sum();
                    }
                    acc(*bias, db);
                    acc(*input, g);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > T::ZERO { gv } else { T::ZERO })?;
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (T::ONE - y))?;
                    acc(*a, d);
                }
                Op::ChannelStats { input, argmax } => {
                    acc(*input, ops::channel_stats_backward(self.value(*input).shape(), argmax, &g));
                }
                Op::GlobalAvgPool(a) => acc(*a, ops::global_avg_pool_backward(self.value(*a).shape(), &g)),
                Op::Upsample(a) => acc(*a, ops::bilinear_upsample_backward(self.value(*a).shape(), &g)),
                Op::Softmax { input, axis } => acc(*input, ops::softmax_backward(&node.value, &g, *axis)),
                Op::Concat(inputs) => {
                    let (n, total_c, h, w) = g.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &v in inputs {
                        let c = self.value(v).shape()[1];
                        if self.rg(v) {
                            let mut data = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let start = (b * total_c + offset) * plane;
                                data.extend_from_slice(&g.data()[start..start + c * plane]);
                            }
                            acc(v, Tensor::new(vec![n, c, h, w], data)?);
                        }
                        offset += c;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let (n, c, h, w) = self.value(*input).dims4()?;
                    let len = g.shape()[1];
                    let plane = h * w;
                    let mut d = Tensor::zeros(vec![n, c, h, w]);
                    for b in 0..n {
                        let src = &g.data()[b * len * plane..(b + 1) * len * plane];
                        d.data_mut()[(b * c + start) * plane..(b * c + start + len) * plane].copy_from_slice(src);
                    }
                    acc(*input, d);
                }
                Op::CrossEntropy { input, target } => {
                    acc(*input, ops::cross_entropy_backward(self.value(*input), target, g.data()[0]));
                }
                Op::WeightedSum { input, weights } => {
                    let s = g.data()[0];
                    acc(*input, weights.map(|w| w * s));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
