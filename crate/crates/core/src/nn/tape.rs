use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeometry, GroupStats};
use super::params::{ParamId, ParamStore};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddChannelBias(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    GroupNorm { input: Var, gain: Var, offset: Var, groups: usize, stats: Vec<GroupStats> },
    Silu(Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    Narrow { input: Var, start: usize, len: usize },
    Reshape(Var),
    Matmul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives for reverse-mode differentiation.
///
/// Every primitive stores its output; inputs are referenced by [`Var`] so
/// backward reads them from the earlier nodes. A tape supports exactly one
/// backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    trace: Vec<usize>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Node indices visited by the last backward pass, in visiting order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.trace
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), what)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x[N, C, ...] + bias[N, C]` broadcast over the trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(bias) != &xs[..2] {
            bail!(Shape, "add_channel_bias: {:?} vs bias {:?}", xs, self.shape(bias));
        }
        let spatial = self.value(x).len() / (xs[0] * xs[1]);
        let mut out = self.value(x).clone();
        for (chunk, &b) in out.data_mut().chunks_exact_mut(spatial).zip(self.value(bias).data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry { stride, padding };
        let out = kernels::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &ins))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, &ins))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gain: Var, offset: Var, eps: f32) -> Result<Var> {
        let (out, stats) = kernels::group_norm(self.value(input), groups, self.value(gain), self.value(offset), eps)?;
        Ok(self.push(out, Op::GroupNorm { input, gain, offset, groups, stats }, &[input, gain, offset]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(x.shape(), |i| kernels::silu(x.data()[i]));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = kernels::upsample2x(self.value(a))?;
        Ok(self.push(v, Op::Upsample2x(a), &[a]))
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Shape, "concat of nothing") };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            bail!(Shape, "concat: rank < 2");
        }
        let n = s0[0];
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
                bail!(Shape, "concat: {:?} vs {:?}", s, s0);
            }
            channels += s[1];
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for &p in parts {
                let x = self.value(p);
                let per = x.len() / n;
                out.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            bail!(Shape, "narrow {}..{} of {:?}", start, start + len, s);
        }
        let inner: usize = s[2..].iter().product();
        let x = self.value(input);
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for i in 0..s[0] {
            let base = (i * s[1] + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Narrow { input, start, len }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(input), &[input]))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let v = kernels::batched_matmul(self.value(a), self.value(b), trans_a, trans_b)?;
        Ok(self.push(v, Op::Matmul { a, b, trans_a, trans_b }, &[a, b]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = kernels::softmax_last(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Propagate `∂loss/∂·` back through the tape and accumulate parameter
    /// gradients into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            bail!(State, "backward already ran on this tape; record a new forward pass");
        }
        if self.value(loss).len() != 1 {
            bail!(Shape, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        self.backward_done = true;
        self.trace.clear();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.trace.push(i);
            let nodes = &self.nodes;
            let node = &nodes[i];
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        let neg = Tensor::from_fn(g.shape(), |k| -g.data()[k]);
                        accumulate(&mut grads, *b, neg);
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga = Tensor::from_fn(g.shape(), |k| g.data()[k] * y.data()[k]);
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let gb = Tensor::from_fn(g.shape(), |k| g.data()[k] * x.data()[k]);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    if needs(*a) {
                        let s = *s;
                        accumulate(&mut grads, *a, Tensor::from_fn(g.shape(), |k| g.data()[k] * s));
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if needs(*b) {
                        let nb = val(*b).len();
                        let spatial = g.len() / nb;
                        let gb: Vec<f32> = g
                            .data()
                            .chunks_exact(spatial)
                            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect();
                        accumulate(&mut grads, *b, Tensor::new(val(*b).shape(), gb)?);
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let need = [needs(*input), needs(*weight), bias.is_some_and(needs)];
                    let cg = kernels::conv2d_backward(val(*input), val(*weight), &g, *geom, need)?;
                    accumulate_opt(&mut grads, *input, cg.input);
                    accumulate_opt(&mut grads, *weight, cg.weight);
                    if let Some(b) = bias {
                        accumulate_opt(&mut grads, *b, cg.bias);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let need = [needs(*input), needs(*weight), bias.is_some_and(needs)];
                    let lg = kernels::linear_backward(val(*input), val(*weight), &g, need)?;
                    accumulate_opt(&mut grads, *input, lg.input);
                    accumulate_opt(&mut grads, *weight, lg.weight);
                    if let Some(b) = bias {
                        accumulate_opt(&mut grads, *b, lg.bias);
                    }
                }
                Op::GroupNorm { input, gain, offset, groups, stats } => {
                    let (gx, ggain, goff) = kernels::group_norm_backward(val(*input), *groups, val(*gain), stats, &g)?;
                    if needs(*input) {
                        accumulate(&mut grads, *input, gx);
                    }
                    if needs(*gain) {
                        accumulate(&mut grads, *gain, ggain);
                    }
                    if needs(*offset) {
                        accumulate(&mut grads, *offset, goff);
                    }
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let gx = Tensor::from_fn(g.shape(), |k| g.data()[k] * kernels::silu_grad(x.data()[k]));
                    accumulate(&mut grads, *a, gx);
                }
                Op::Upsample2x(a) => {
                    accumulate(&mut grads, *a, kernels::upsample2x_backward(&g)?);
                }
                Op::Concat(parts) => {
                    let n = g.shape()[0];
                    let per_out = g.len() / n;
                    let mut offset = 0;
                    for &p in parts {
                        let per = val(p).len() / n;
                        if needs(p) {
                            let mut d = Vec::with_capacity(per * n);
                            for s in 0..n {
                                d.extend_from_slice(&g.data()[s * per_out + offset..s * per_out + offset + per]);
                            }
                            accumulate(&mut grads, p, Tensor::new(val(p).shape(), d)?);
                        }
                        offset += per;
                    }
                }
                Op::Narrow { input, start, len } => {
                    let s = val(*input).shape();
                    let inner: usize = s[2..].iter().product();
                    let mut d = vec![0.0f32; val(*input).len()];
                    for n in 0..s[0] {
                        let src = &g.data()[n * len * inner..(n + 1) * len * inner];
                        let base = (n * s[1] + start) * inner;
                        d[base..base + len * inner].copy_from_slice(src);
                    }
                    accumulate(&mut grads, *input, Tensor::new(s, d)?);
                }
                Op::Reshape(a) => {
                    let s = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&s)?);
                }
                Op::Matmul { a, b, trans_a, trans_b } => {
                    let (ga, gb) = kernels::batched_matmul_backward(
                        val(*a),
                        val(*b),
                        *trans_a,
                        *trans_b,
                        &g,
                        [needs(*a), needs(*b)],
                    )?;
                    accumulate_opt(&mut grads, *a, ga);
                    accumulate_opt(&mut grads, *b, gb);
                }
                Op::Softmax(a) => {
                    let gx = kernels::softmax_last_backward(&node.value, &g)?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(val(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let s = (g.data()[0] as f64 / x.len() as f64) as f32;
                    accumulate(&mut grads, *a, Tensor::full(x.shape(), s));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt(grads: &mut [Option<Tensor>], v: Var, g: Option<Tensor>) {
    if let Some(g) = g {
        accumulate(grads, v, g);
    }
}
