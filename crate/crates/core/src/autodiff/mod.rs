//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, so creation order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Parameters enter the graph
//! through [`Graph::param`] keyed by [`ParamId`]; using the same parameter
//! twice in one graph yields one leaf, so its gradient accumulates over both
//! uses.

pub mod conv;

use std::collections::HashMap;

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use conv::{col2im, im2col, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Stable identity of a learnable tensor within a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, out_c: usize },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, in_c: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log { x: Var, floor: T },
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Softmax(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics of one training-mode batch-norm application.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    variables: Vec<Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    variables: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.variables.get(&v)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }
}

/// Splits a shape into (outer, channels, inner) around axis 1.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op on shape {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            variables: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable non-parameter input whose gradient is reported by
    /// [`Gradients::var`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.variables.push(v);
        v
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(value, op, &[a, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul of {sa:?} and {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        self.push(Tensor::from_vec(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a per-channel bias `b[C]` to `x[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (outer, ch, inner) = channel_layout(self.shape(x));
        assert_eq!(self.shape(b), &[ch], "bias shape");
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bias[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(shape, out), Op::AddBias(x, b), &[x, b])
    }

    /// Strided correlation of `x[N, C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1] && ws[2] == ws[3], "conv2d of {xs:?} with {ws:?}");
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .unwrap_or_else(|| panic!("conv2d window does not fit {xs:?}"));
        let (n, out_c) = (xs[0], ws[0]);
        let (pl, pos) = (geom.patch_len(), geom.positions());
        let mut cols = vec![T::zero(); pl * pos];
        let mut out = vec![T::zero(); n * out_c * pos];
        let xd = self.data(x);
        let wd = self.data(w);
        for i in 0..n {
            im2col(&xd[i * geom.image_len()..(i + 1) * geom.image_len()], &geom, &mut cols);
            gemm(false, false, out_c, pl, pos, T::one(), wd, &cols, T::zero(), &mut out[i * out_c * pos..(i + 1) * out_c * pos]);
        }
        let value = Tensor::from_vec(vec![n, out_c, geom.oh, geom.ow], out);
        self.push(value, Op::Conv2d { x, w, geom, out_c }, &[x, w])
    }

    /// Transposed strided convolution of `x[N, C, h, w]` with `w[C, O, k, k]`,
    /// producing `[N, O, (h-1)*stride - 2*pad + k, ...]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[0] && ws[2] == ws[3], "conv_transpose2d of {xs:?} with {ws:?}");
        let (n, in_c, out_c, k) = (xs[0], xs[1], ws[1], ws[2]);
        let oh = (xs[2] - 1) * stride + k - 2 * pad;
        let ow = (xs[3] - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(out_c, oh, ow, k, stride, pad).expect("transpose geometry");
        assert_eq!((geom.oh, geom.ow), (xs[2], xs[3]), "transpose geometry round trip");
        let (pl, pos) = (geom.patch_len(), geom.positions());
        let mut cols = vec![T::zero(); pl * pos];
        let mut out = vec![T::zero(); n * geom.image_len()];
        let xd = self.data(x);
        let wd = self.data(w);
        for i in 0..n {
            gemm(true, false, pl, in_c, pos, T::one(), wd, &xd[i * in_c * pos..(i + 1) * in_c * pos], T::zero(), &mut cols);
            col2im(&cols, &geom, &mut out[i * geom.image_len()..(i + 1) * geom.image_len()]);
        }
        let value = Tensor::from_vec(vec![n, out_c, oh, ow], out);
        self.push(value, Op::ConvTranspose2d { x, w, geom, in_c }, &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn offset(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v + k, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::Log { x, floor })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2, "softmax expects a matrix");
        let width = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), out);
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Batch normalization with statistics of the current batch, over every
    /// axis except axis 1. Returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchStats<T>) {
        let shape = self.shape(x).to_vec();
        let (outer, ch, inner) = channel_layout(&shape);
        let count = outer * inner;
        assert!(count >= 2, "batch norm needs at least two values per channel");
        let xd = self.data(x);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for &v in &xd[base..base + inner] {
                    mean[c] += v;
                }
            }
        }
        let m = T::from_count(count);
        for v in &mut mean {
            *v /= m;
        }
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for &v in &xd[base..base + inner] {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let biased: Vec<T> = var.iter().map(|&s| s / m).collect();
        let unbiased: Vec<T> = var.iter().map(|&s| s / T::from_count(count - 1)).collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, inv_std, true);
        (
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Var {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, train: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, ch, inner) = channel_layout(&shape);
        assert_eq!(self.shape(gamma), &[ch], "batch norm gamma shape");
        assert_eq!(self.shape(beta), &[ch], "batch norm beta shape");
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = gd[c] * xhat[i] + bd[c];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        self.push(Tensor::from_vec(shape, out), op, &[x, gamma, beta])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(x).reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors).unwrap_or_else(|e| panic!("{e}"));
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let collect = |v: Var, grads: &mut Vec<Option<Vec<T>>>| {
            let shape = self.shape(v).to_vec();
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); self.value(v).numel()]);
            Tensor::from_vec(shape, g)
        };
        let mut params = HashMap::new();
        for (&id, &v) in &self.params {
            params.insert(id, collect(v, &mut grads));
        }
        let mut variables = HashMap::new();
        for &v in &self.variables {
            variables.insert(v, collect(v, &mut grads));
        }
        Gradients { params, variables }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(buf);
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, dy: &[T], scale: T) {
        self.accumulate(grads, v, |g| {
            for (g, &d) in g.iter_mut().zip(dy) {
                *g += d * scale;
            }
        });
    }

    fn elementwise(&self, grads: &mut [Option<Vec<T>>], v: Var, dy: &[T], local: impl Fn(usize) -> T) {
        self.accumulate(grads, v, |g| {
            for (i, (g, &d)) in g.iter_mut().zip(dy).enumerate() {
                *g += d * local(i);
            }
        });
    }

    fn propagate(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| gemm(false, true, m, n, k, T::one(), dy, bd, T::one(), g));
                self.accumulate(grads, *b, |g| gemm(true, false, k, m, n, T::one(), ad, dy, T::one(), g));
            }
            Op::AddBias(x, b) => {
                self.add_into(grads, *x, dy, T::one());
                let (outer, ch, inner) = channel_layout(self.shape(*x));
                self.accumulate(grads, *b, |g| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            g[c] += dy[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom, out_c } => {
                let n = self.shape(*x)[0];
                let (pl, pos, il) = (geom.patch_len(), geom.positions(), geom.image_len());
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut cols = vec![T::zero(); pl * pos];
                if self.nodes[w.0].needs_grad {
                    self.accumulate(grads, *w, |g| {
                        for i in 0..n {
                            im2col(&xd[i * il..(i + 1) * il], geom, &mut cols);
                            let dyi = &dy[i * out_c * pos..(i + 1) * out_c * pos];
                            gemm(false, true, *out_c, pos, pl, T::one(), dyi, &cols, T::one(), g);
                        }
                    });
                }
                self.accumulate(grads, *x, |g| {
                    for i in 0..n {
                        let dyi = &dy[i * out_c * pos..(i + 1) * out_c * pos];
                        gemm(true, false, pl, *out_c, pos, T::one(), wd, dyi, T::zero(), &mut cols);
                        col2im(&cols, geom, &mut g[i * il..(i + 1) * il]);
                    }
                });
            }
            Op::ConvTranspose2d { x, w, geom, in_c } => {
                let n = self.shape(*x)[0];
                let (pl, pos, il) = (geom.patch_len(), geom.positions(), geom.image_len());
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut cols = vec![T::zero(); n * pl * pos];
                for i in 0..n {
                    im2col(&dy[i * il..(i + 1) * il], geom, &mut cols[i * pl * pos..(i + 1) * pl * pos]);
                }
                self.accumulate(grads, *x, |g| {
                    for i in 0..n {
                        let ci = &cols[i * pl * pos..(i + 1) * pl * pos];
                        gemm(false, false, *in_c, pl, pos, T::one(), wd, ci, T::one(), &mut g[i * in_c * pos..(i + 1) * in_c * pos]);
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for i in 0..n {
                        let ci = &cols[i * pl * pos..(i + 1) * pl * pos];
                        let xi = &xd[i * in_c * pos..(i + 1) * in_c * pos];
                        gemm(false, true, *in_c, pos, pl, T::one(), xi, ci, T::one(), g);
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, dy, T::one());
                self.add_into(grads, *b, dy, T::one());
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, dy, T::one());
                self.add_into(grads, *b, dy, -T::one());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.elementwise(grads, *a, dy, |i| bd[i]);
                self.elementwise(grads, *b, dy, |i| ad[i]);
            }
            Op::Scale(x, k) => self.add_into(grads, *x, dy, *k),
            Op::Offset(x) | Op::Reshape(x) => self.add_into(grads, *x, dy, T::one()),
            Op::LeakyRelu(x, slope) => {
                let xd = self.data(*x);
                self.elementwise(grads, *x, dy, |i| if xd[i] > T::zero() { T::one() } else { *slope });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.elementwise(grads, *x, dy, |i| if xd[i] > T::zero() { T::one() } else { T::zero() });
            }
            Op::Sigmoid(x) => self.elementwise(grads, *x, dy, |i| y[i] * (T::one() - y[i])),
            Op::Exp(x) => self.elementwise(grads, *x, dy, |i| y[i]),
            Op::Log { x, floor } => {
                let xd = self.data(*x);
                self.elementwise(grads, *x, dy, |i| if xd[i] > *floor { T::one() / xd[i] } else { T::zero() });
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                self.elementwise(grads, *x, dy, |i| xd[i] + xd[i]);
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                self.elementwise(grads, *x, dy, |i| if xd[i] >= *lo && xd[i] <= *hi { T::one() } else { T::zero() });
            }
            Op::Softmax(x) => {
                let width = node.value.shape()[1];
                self.accumulate(grads, *x, |g| {
                    for ((gr, yr), dr) in g.chunks_mut(width).zip(y.chunks(width)).zip(dy.chunks(width)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..width {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, ch, inner) = channel_layout(self.shape(*x));
                let gd = self.data(*gamma);
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_dy[c] += dy[i];
                            sum_dy_xhat[c] += dy[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |g| {
                    for c in 0..ch {
                        g[c] += sum_dy_xhat[c];
                    }
                });
                self.accumulate(grads, *beta, |g| {
                    for c in 0..ch {
                        g[c] += sum_dy[c];
                    }
                });
                let m = T::from_count(outer * inner);
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gd[c] * inv_std[c];
                            for i in base..base + inner {
                                g[i] += if *train {
                                    k * (dy[i] - sum_dy[c] / m - xhat[i] * sum_dy_xhat[c] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(x) => {
                let d = dy[0] / T::from_count(self.value(*x).numel().max(1));
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if w == 0 {
                        continue;
                    }
                    self.accumulate(grads, p, |g| {
                        for (r, gr) in g.chunks_mut(w).enumerate() {
                            for (j, gv) in gr.iter_mut().enumerate() {
                                *gv += dy[r * total + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let total = self.shape(*x)[1];
                let w = node.value.shape()[1];
                if w == 0 {
                    return;
                }
                self.accumulate(grads, *x, |g| {
                    for (r, dr) in dy.chunks(w).enumerate() {
                        for (j, &d) in dr.iter().enumerate() {
                            g[r * total + start + j] += d;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
