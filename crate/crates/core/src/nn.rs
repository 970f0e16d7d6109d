//! Parameterized layers on top of [`Graph`].

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BatchStats, Graph, ParamId, Var};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running statistics; forward is a pure function.
    Eval,
}

/// A learnable tensor with a stable id and a checkpoint name.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn var(&self, g: &mut Graph<T>) -> Var {
        g.param(self.id, &self.value)
    }
}

/// A non-learned tensor that is still part of model state.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Hands out parameter ids and draws initial weights.
pub struct Init<'a> {
    next_id: u32,
    rng: &'a mut Stream,
    std: f64,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut Stream, std: f64) -> Self {
        Init { next_id: 0, rng, std }
    }

    fn id(&mut self) -> ParamId {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Normal(0, std) truncated to two standard deviations by resampling.
    pub fn truncated_normal<T: Scalar>(&mut self, name: String, shape: Vec<usize>) -> Param<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let e: f64 = StandardNormal.sample(&mut *self.rng);
                if e.abs() <= 2.0 {
                    break T::lit(e * self.std);
                }
            })
            .collect();
        Param {
            id: self.id(),
            name,
            value: Tensor::from_vec(shape, data),
        }
    }

    pub fn constant<T: Scalar>(&mut self, name: String, shape: Vec<usize>, value: f64) -> Param<T> {
        Param {
            id: self.id(),
            name,
            value: Tensor::full(shape, T::lit(value)),
        }
    }
}

/// Common traversal over a module's state.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }

    /// FNV-1a over the bit patterns of every parameter and buffer.
    fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for p in self.params() {
            h.tensor(&p.value);
        }
        for b in self.buffers() {
            h.tensor(&b.value);
        }
        h.0
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_finite())
    }
}

pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        self.bytes(&buf);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: init.truncated_normal(format!("{name}.weight"), vec![inputs, outputs]),
            bias: init.constant(format!("{name}.bias"), vec![outputs], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = self.weight.var(g);
        let b = self.bias.var(g);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    pub fn outputs(&self) -> usize {
        self.bias.value.numel()
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Strided convolution with `(k - stride) / 2` padding, so even sides are
/// divided exactly by the stride.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(init: &mut Init, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            weight: init.truncated_normal(format!("{name}.weight"), vec![out_c, in_c, k, k]),
            bias: init.constant(format!("{name}.bias"), vec![out_c], 0.0),
            stride,
        }
    }

    fn pad(&self) -> usize {
        (self.weight.value.shape()[2] - self.stride) / 2
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = self.weight.var(g);
        let b = self.bias.var(g);
        let y = g.conv2d(x, w, self.stride, self.pad());
        g.add_bias(y, b)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution that multiplies even sides by the stride.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(init: &mut Init, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        ConvTranspose2d {
            weight: init.truncated_normal(format!("{name}.weight"), vec![in_c, out_c, k, k]),
            bias: init.constant(format!("{name}.bias"), vec![out_c], 0.0),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = self.weight.var(g);
        let b = self.bias.var(g);
        let pad = (self.weight.value.shape()[2] - self.stride) / 2;
        let y = g.conv_transpose2d(x, w, self.stride, pad);
        g.add_bias(y, b)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization over axis 1 with running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(init: &mut Init, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: init.constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(vec![channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(vec![channels], T::one()),
            },
            eps,
            momentum,
        }
    }

    /// In train mode the batch statistics are appended to `sink`; apply them
    /// afterwards with [`BatchNorm::update_running`].
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, sink: &mut Vec<BatchStats<T>>) -> Var {
        let gamma = self.gamma.var(g);
        let beta = self.beta.var(g);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, T::lit(self.eps));
                sink.push(stats);
                y
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                T::lit(self.eps),
            ),
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.value.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Applies recorded batch statistics to batch-norm layers in call order.
pub fn commit_stats<T: Scalar>(layers: Vec<&mut BatchNorm<T>>, sink: Vec<BatchStats<T>>) {
    assert_eq!(
        layers.len(),
        sink.len(),
        "batch-norm layers and recorded statistics disagree"
    );
    for (bn, stats) in layers.into_iter().zip(&sink) {
        bn.update_running(stats);
    }
}
