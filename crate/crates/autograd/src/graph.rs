//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes that
//! do not depend on a gradient-requiring leaf are never visited by
//! [`Graph::backward`], so frozen sub-networks cost nothing on the way back.
//!
//! Ops check shapes with assertions: a mismatch inside a graph is a bug in
//! the calling model code, not a recoverable condition.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose2(Var),
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, rows: Vec<usize> },
    Concat(Vec<Var>),
    LogSoftmax(Var),
    AddChannelBias { x: Var, bias: Var },
    Conv2d { x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Warp { img: Var, flow: Var },
    Resize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch in {op:?}");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Minimum(a, b), f64::min)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Maximum(a, b), f64::max)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.numel() > 0, "mean of empty tensor");
        let m = v.sum() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshape(shape).expect("reshape size");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rank(), 2, "transpose2 needs a matrix");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let d = v.data();
        let value = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        let rg = self.rg(a);
        self.push(value, Op::Transpose2(a), rg)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let shape = v.shape();
        assert!(axis < shape.len() && start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let value = Tensor::new(&out_shape, data).expect("narrow shape");
        let rg = self.rg(a);
        self.push(value, Op::Narrow { x: a, axis, start }, rg)
    }

    /// Gather rows (slices along axis 0).
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = &self.nodes[a.0].value;
        let shape = v.shape();
        assert!(!shape.is_empty());
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            assert!(r < shape[0], "row {r} out of range");
            data.extend_from_slice(&v.data()[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let value = Tensor::new(&out_shape, data).expect("index_select shape");
        let rg = self.rg(a);
        self.push(
            value,
            Op::IndexSelect {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Concatenate along axis 0; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.nodes[parts[0].0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(&v.shape()[1..], &tail[..], "concat trailing dims differ");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            rg |= self.rg(p);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data).expect("concat shape");
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let n = *v.shape().last().expect("log_softmax needs rank >= 1");
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×...` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let b = &self.nodes[bias.0].value;
        let c = v.shape()[0];
        assert_eq!(b.numel(), c, "bias length must equal channel count");
        let inner = v.numel() / c;
        let mut data = v.data().to_vec();
        for (ch, plane) in data.chunks_mut(inner).enumerate() {
            for x in plane {
                *x += b.data()[ch];
            }
        }
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddChannelBias { x, bias }, rg)
    }

    /// 2-D convolution of a `Cin×H×W` input with a `Cout×Cin×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[weight.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be C×H×W");
        assert_eq!(ws.len(), 4, "conv2d weight must be Cout×Cin×k×k");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad);
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[weight.0].value.data(),
            bias.map(|b| self.nodes[b.0].value.data()),
            &geom,
        );
        let value = Tensor::new(&[geom.cout, geom.ho, geom.wo], out).expect("conv shape");
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, weight, bias, geom }, rg)
    }

    /// Bilinear warp of a `C×H×W` image by a `2×H×W` displacement field.
    pub fn warp(&mut self, img: Var, flow: Var) -> Var {
        let is = self.nodes[img.0].value.shape().to_vec();
        let fs = self.nodes[flow.0].value.shape().to_vec();
        assert_eq!(is.len(), 3);
        assert_eq!(fs, vec![2, is[1], is[2]], "flow must be 2×H×W");
        let out = kernels::warp_bilinear(
            self.nodes[img.0].value.data(),
            is[0],
            is[1],
            is[2],
            self.nodes[flow.0].value.data(),
        );
        let value = Tensor::new(&is, out).expect("warp shape");
        let rg = self.rg(img) || self.rg(flow);
        self.push(value, Op::Warp { img, flow }, rg)
    }

    /// Bilinear resize of a `C×H×W` block to `C×oh×ow`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        if s[1] == oh && s[2] == ow {
            return x;
        }
        let out = kernels::resize_bilinear(self.nodes[x.0].value.data(), s[0], s[1], s[2], oh, ow);
        let value = Tensor::new(&[s[0], oh, ow], out).expect("resize shape");
        let rg = self.rg(x);
        self.push(value, Op::Resize(x), rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.numel(), 1, "backward needs a scalar loss");
        if !self.rg(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn zip_grad(&self, g: &Tensor, v: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let x = &self.nodes[v.0].value;
        let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    fn zip_grad_out(&self, g: &Tensor, out: usize, v: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let y = &self.nodes[out].value;
        let data = g.data().iter().zip(y.data()).map(|(&gi, &yi)| f(gi, yi)).collect();
        Tensor::new(self.nodes[v.0].value.shape(), data).expect("same shape")
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = self.zip_grad(g, *b, |gi, bi| gi * bi);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.zip_grad(g, *a, |gi, ai| gi * ai);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let ga = self.zip_grad(g, *b, |gi, bi| gi / bi);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let data = (0..g.numel()).map(|k| -g.data()[k] * va[k] / (vb[k] * vb[k])).collect();
                    self.accumulate(grads, *b, Tensor::new(val(*b).shape(), data).expect("shape"));
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(self.nodes[i].op, Op::Minimum(..));
                let (va, vb) = (val(*a).data(), val(*b).data());
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                let shape = val(*a).shape();
                let ga = g.data().iter().zip(&pick_a).map(|(&gi, &p)| if p { gi } else { 0.0 });
                let gb = g.data().iter().zip(&pick_a).map(|(&gi, &p)| if p { 0.0 } else { gi });
                self.accumulate(grads, *a, Tensor::new(shape, ga.collect()).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(shape, gb.collect()).expect("shape"));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = Tensor::new(val(*a).shape(), g.data().to_vec()).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Exp(a) => {
                let t = self.zip_grad_out(g, i, *a, |gi, y| gi * y);
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let t = self.zip_grad(g, *a, |gi, x| gi / x);
                self.accumulate(grads, *a, t);
            }
            Op::Sqrt(a) => {
                let t = self.zip_grad_out(g, i, *a, |gi, y| gi * 0.5 / y);
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let t = self.zip_grad(g, *a, |gi, x| gi * 2.0 * x);
                self.accumulate(grads, *a, t);
            }
            Op::Abs(a) => {
                let t = self.zip_grad(g, *a, |gi, x| if x > 0.0 { gi } else if x < 0.0 { -gi } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let t = self.zip_grad(g, *a, |gi, x| gi * p * x.powf(p - 1.0));
                self.accumulate(grads, *a, t);
            }
            Op::Sigmoid(a) => {
                let t = self.zip_grad_out(g, i, *a, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = self.zip_grad_out(g, i, *a, |gi, y| gi * (1.0 - y * y));
                self.accumulate(grads, *a, t);
            }
            Op::Silu(a) => {
                let t = self.zip_grad(g, *a, |gi, x| {
                    let s = sigmoid(x);
                    gi * (s + x * s * (1.0 - s))
                });
                self.accumulate(grads, *a, t);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let t = self.zip_grad(g, *a, |gi, x| if x < lo || x > hi { 0.0 } else { gi });
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                let s = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Transpose2(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                // g is c×r; back to r×c
                let gd = g.data();
                let t = Tensor::from_fn(&[r, c], |k| gd[(k % c) * r + k / c]);
                self.accumulate(grads, *a, t);
            }
            Op::Narrow { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let (axis, start) = (*axis, *start);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = g.shape()[axis];
                self.accumulate_with(grads, *x, |dst| {
                    for o in 0..outer {
                        let base = (o * shape[axis] + start) * inner;
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::IndexSelect { x, rows } => {
                let inner: usize = val(*x).shape()[1..].iter().product();
                self.accumulate_with(grads, *x, |dst| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, s) in dst[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&g.data()[k * inner..(k + 1) * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if self.rg(p) {
                        let t = Tensor::new(val(p).shape(), g.data()[offset..offset + n].to_vec()).expect("shape");
                        self.accumulate(grads, p, t);
                    }
                    offset += n;
                }
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(&yl, &gl)| gl - yl.exp() * gs));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), out).expect("shape"));
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let c = val(*bias).numel();
                    let inner = g.numel() / c;
                    let db: Vec<f64> = g.data().chunks(inner).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(val(*bias).shape(), db).expect("shape"));
                }
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x).data(), val(*weight).data(), g.data(), geom, self.rg(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape(), dx).expect("shape"));
                }
                self.accumulate(grads, *weight, Tensor::new(val(*weight).shape(), dw).expect("shape"));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, Tensor::new(val(*b).shape(), db).expect("shape"));
                }
            }
            Op::Warp { img, flow } => {
                let s = val(*img).shape().to_vec();
                let (rgi, rgf) = (self.rg(*img), self.rg(*flow));
                let mut di = rgi.then(|| vec![0.0; val(*img).numel()]);
                let mut df = rgf.then(|| vec![0.0; val(*flow).numel()]);
                kernels::warp_bilinear_backward(
                    val(*img).data(),
                    s[0],
                    s[1],
                    s[2],
                    val(*flow).data(),
                    g.data(),
                    di.as_deref_mut(),
                    df.as_deref_mut(),
                );
                if let Some(di) = di {
                    self.accumulate(grads, *img, Tensor::new(&s, di).expect("shape"));
                }
                if let Some(df) = df {
                    self.accumulate(grads, *flow, Tensor::new(val(*flow).shape(), df).expect("shape"));
                }
            }
            Op::Resize(x) => {
                let s = val(*x).shape().to_vec();
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                self.accumulate_with(grads, *x, |dst| {
                    kernels::resize_bilinear_backward(g.data(), s[0], s[1], s[2], oh, ow, dst)
                });
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
