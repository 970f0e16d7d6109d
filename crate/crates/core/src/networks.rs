//! Encoder, decoder, latent critics and image discriminator.
//!
//! Images are `[B, C, H, W]` tensors with values in `[0, 1]`; for the
//! single-channel datasets this is byte-identical to `B x H x W x 1`.
//!
//! Layer stacks (defaults in parentheses):
//!
//! | network | layers |
//! |---|---|
//! | encoder | conv(64) LReLU BN, conv(128) LReLU BN, fc(1024) LReLU BN, heads |
//! | encoder heads | c: fc BN softmax; s mean: fc LReLU BN; s sigma: fc LReLU BN exp; n: fc LReLU BN |
//! | decoder | fc(1024) ReLU BN, fc(128·7·7) ReLU BN, deconv(64) ReLU BN, deconv(C) sigmoid |
//! | latent critic | fc(3000) LReLU, fc(3000) LReLU, fc(1) raw |
//! | image discriminator | conv(64) LReLU, conv(128) LReLU BN, fc(1024) LReLU BN, fc(1) sigmoid |

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
pub use crate::latent::Slot;
use crate::latent::LatentConfig;
use crate::nn::{commit_stats, BatchNorm, Buffer, Conv2d, ConvTranspose2d, Init, Linear, Mode, Module, Param};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_side: usize,
    pub channels: usize,
    pub conv_widths: [usize; 2],
    pub kernel: usize,
    pub stride: usize,
    pub fc_width: usize,
    pub critic_width: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
    /// Bounds applied to the sigma head output.
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_side: 28,
            channels: 1,
            conv_widths: [64, 128],
            kernel: 4,
            stride: 2,
            fc_width: 1024,
            critic_width: 3000,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_std: 0.02,
            sigma_min: 1e-4,
            sigma_max: 1e2,
        }
    }
}

impl ArchConfig {
    /// A narrow variant of the default stack for tests and smoke runs.
    pub fn tiny(image_side: usize) -> Self {
        ArchConfig {
            image_side,
            conv_widths: [4, 8],
            fc_width: 32,
            critic_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 2 {
            return Err(Error::config(format!("arch.stride must be 2, got {}", self.stride)));
        }
        if self.kernel < 2 || self.kernel % 2 != 0 {
            return Err(Error::config(format!("arch.kernel must be even and >= 2, got {}", self.kernel)));
        }
        if self.image_side == 0 || self.image_side % 4 != 0 {
            return Err(Error::config(format!(
                "arch.image_side must be a positive multiple of 4, got {}",
                self.image_side
            )));
        }
        let widths = [self.channels, self.conv_widths[0], self.conv_widths[1], self.fc_width, self.critic_width];
        if widths.contains(&0) {
            return Err(Error::config("arch widths must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("arch.leaky_slope must be in [0, 1)"));
        }
        if !(self.bn_eps > 0.0 && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("arch batch-norm eps must be > 0 and momentum in (0, 1]"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("arch.init_std must be positive"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::config("arch sigma bounds must satisfy 0 < sigma_min < sigma_max"));
        }
        Ok(())
    }

    fn bottleneck_side(&self) -> usize {
        self.image_side / 4
    }

    fn flat_width(&self) -> usize {
        self.conv_widths[1] * self.bottleneck_side() * self.bottleneck_side()
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.image_side, self.image_side]
    }
}

/// Encoder outputs, either as graph variables or as values.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoded<X> {
    Disentangled { c_probs: X, s_mu: X, s_sigma: X, n: X },
    Entangled { z: X },
}

pub type EncoderVars = Encoded<Var>;
pub type EncoderOutput<T> = Encoded<Tensor<T>>;

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        match self {
            Encoded::Disentangled { c_probs, .. } => c_probs.rows(),
            Encoded::Entangled { z } => z.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic code: `c_probs ‖ s_mu ‖ n`, or `z`.
    pub fn mean_code(&self) -> Tensor<T> {
        match self {
            Encoded::Disentangled { c_probs, s_mu, n, .. } => {
                Tensor::concat_cols(&[c_probs, s_mu, n]).expect("heads share the batch size")
            }
            Encoded::Entangled { z } => z.clone(),
        }
    }
}

impl EncoderVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> EncoderOutput<T> {
        match *self {
            Encoded::Disentangled { c_probs, s_mu, s_sigma, n } => Encoded::Disentangled {
                c_probs: g.value(c_probs).clone(),
                s_mu: g.value(s_mu).clone(),
                s_sigma: g.value(s_sigma).clone(),
                n: g.value(n).clone(),
            },
            Encoded::Entangled { z } => Encoded::Entangled { z: g.value(z).clone() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head<T> {
    pub fc: Linear<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> Head<T> {
    fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize, arch: &ArchConfig) -> Option<Self> {
        (outputs > 0).then(|| Head {
            fc: Linear::new(init, &format!("{name}.fc"), inputs, outputs),
            bn: BatchNorm::new(init, &format!("{name}.bn"), outputs, arch.bn_eps, arch.bn_momentum),
        })
    }

    /// fc, optional leaky ReLU, batch norm.
    fn forward(&self, g: &mut Graph<T>, x: Var, slope: Option<T>, mode: Mode, sink: &mut Vec<BatchStats<T>>) -> Var {
        let mut h = self.fc.forward(g, x);
        if let Some(slope) = slope {
            h = g.leaky_relu(h, slope);
        }
        self.bn.forward(g, h, mode, sink)
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.bn.buffers_mut()
    }
}

fn check_images<T: Scalar>(arch: &ArchConfig, images: &Tensor<T>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != arch.image_shape(0)[1..] {
        return Err(Error::shape(format!(
            "expected images [B, {}, {}, {}], got {s:?}",
            arch.channels, arch.image_side, arch.image_side
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub fc: Linear<T>,
    pub bn_fc: BatchNorm<T>,
    pub c: Option<Head<T>>,
    pub s_mu: Option<Head<T>>,
    pub s_sigma: Option<Head<T>>,
    pub n: Option<Head<T>>,
    pub z: Option<Head<T>>,
    arch: ArchConfig,
    latent: LatentConfig,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(init: &mut Init, arch: &ArchConfig, latent: &LatentConfig) -> Self {
        let [w1, w2] = arch.conv_widths;
        let conv1 = Conv2d::new(init, "encoder.conv1", arch.channels, w1, arch.kernel, arch.stride);
        let bn1 = BatchNorm::new(init, "encoder.bn1", w1, arch.bn_eps, arch.bn_momentum);
        let conv2 = Conv2d::new(init, "encoder.conv2", w1, w2, arch.kernel, arch.stride);
        let bn2 = BatchNorm::new(init, "encoder.bn2", w2, arch.bn_eps, arch.bn_momentum);
        let fc = Linear::new(init, "encoder.fc", arch.flat_width(), arch.fc_width);
        let bn_fc = BatchNorm::new(init, "encoder.bn_fc", arch.fc_width, arch.bn_eps, arch.bn_momentum);
        let f = arch.fc_width;
        let (c, s_mu, s_sigma, n, z) = match latent.entangled_dim {
            Some(d) => (None, None, None, None, Head::new(init, "encoder.z", f, d, arch)),
            None => (
                Head::new(init, "encoder.c", f, latent.kc, arch),
                Head::new(init, "encoder.s_mu", f, latent.ks, arch),
                Head::new(init, "encoder.s_sigma", f, latent.ks, arch),
                Head::new(init, "encoder.n", f, latent.kn, arch),
                None,
            ),
        };
        Encoder {
            conv1,
            bn1,
            conv2,
            bn2,
            fc,
            bn_fc,
            c,
            s_mu,
            s_sigma,
            n,
            z,
            arch: arch.clone(),
            latent: latent.clone(),
        }
    }

    fn run(&self, g: &mut Graph<T>, x: Var, mode: Mode, sink: &mut Vec<BatchStats<T>>) -> EncoderVars {
        let slope = T::lit(self.arch.leaky_slope);
        let h = self.conv1.forward(g, x);
        let h = g.leaky_relu(h, slope);
        let h = self.bn1.forward(g, h, mode, sink);
        let h = self.conv2.forward(g, h);
        let h = g.leaky_relu(h, slope);
        let h = self.bn2.forward(g, h, mode, sink);
        let batch = g.shape(h)[0];
        let h = g.reshape(h, vec![batch, self.arch.flat_width()]);
        let h = self.fc.forward(g, h);
        let h = g.leaky_relu(h, slope);
        let h = self.bn_fc.forward(g, h, mode, sink);

        if let Some(z) = &self.z {
            return Encoded::Entangled {
                z: z.forward(g, h, Some(slope), mode, sink),
            };
        }
        let empty = |g: &mut Graph<T>| g.input(Tensor::zeros(vec![batch, 0]));
        let c_logits = self.c.as_ref().expect("categorical head").forward(g, h, None, mode, sink);
        let c_probs = g.softmax(c_logits);
        let s_mu = match &self.s_mu {
            Some(head) => head.forward(g, h, Some(slope), mode, sink),
            None => empty(g),
        };
        let s_sigma = match &self.s_sigma {
            Some(head) => {
                let log_sigma = head.forward(g, h, Some(slope), mode, sink);
                let lo = T::lit(self.arch.sigma_min.ln());
                let hi = T::lit(self.arch.sigma_max.ln());
                let log_sigma = g.clamp(log_sigma, lo, hi);
                g.exp(log_sigma)
            }
            None => empty(g),
        };
        let n = match &self.n {
            Some(head) => head.forward(g, h, Some(slope), mode, sink),
            None => empty(g),
        };
        Encoded::Disentangled {
            c_probs,
            s_mu,
            s_sigma,
            n,
        }
    }

    /// Batch-norm layers in the order [`Encoder::run`] applies them.
    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2, &mut self.bn_fc];
        for head in [&mut self.z, &mut self.c, &mut self.s_mu, &mut self.s_sigma, &mut self.n]
            .into_iter()
            .flatten()
        {
            v.push(&mut head.bn);
        }
        v
    }

    pub fn forward_train(&mut self, g: &mut Graph<T>, images: Var) -> EncoderVars {
        let mut sink = Vec::new();
        let out = self.run(g, images, Mode::Train, &mut sink);
        commit_stats(self.bn_layers_mut(), sink);
        out
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, images: Var) -> EncoderVars {
        self.run(g, images, Mode::Eval, &mut Vec::new())
    }

    /// Batch statistics, leaving the running estimates untouched.
    pub fn forward_batch(&self, g: &mut Graph<T>, images: Var) -> EncoderVars {
        self.run(g, images, Mode::Train, &mut Vec::new())
    }

    pub fn forward(&mut self, g: &mut Graph<T>, images: Var, mode: Mode) -> EncoderVars {
        match mode {
            Mode::Train => self.forward_train(g, images),
            Mode::Eval => self.forward_eval(g, images),
        }
    }

    /// Eval-mode encoding of an image batch.
    pub fn encode(&self, images: &Tensor<T>) -> Result<EncoderOutput<T>> {
        check_images(&self.arch, images)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward_eval(&mut g, x);
        Ok(out.values(&g))
    }

    pub fn latent(&self) -> &LatentConfig {
        &self.latent
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        p.extend(self.conv1.params());
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p.extend(self.fc.params());
        p.extend(self.bn_fc.params());
        for head in [&self.c, &self.s_mu, &self.s_sigma, &self.n, &self.z].into_iter().flatten() {
            p.extend(head.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        p.extend(self.conv1.params_mut());
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.fc.params_mut());
        p.extend(self.bn_fc.params_mut());
        for head in [&mut self.c, &mut self.s_mu, &mut self.s_sigma, &mut self.n, &mut self.z]
            .into_iter()
            .flatten()
        {
            p.extend(head.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = Vec::new();
        b.extend(self.bn1.buffers());
        b.extend(self.bn2.buffers());
        b.extend(self.bn_fc.buffers());
        for head in [&self.c, &self.s_mu, &self.s_sigma, &self.n, &self.z].into_iter().flatten() {
            b.extend(head.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut b = Vec::new();
        b.extend(self.bn1.buffers_mut());
        b.extend(self.bn2.buffers_mut());
        b.extend(self.bn_fc.buffers_mut());
        for head in [&mut self.c, &mut self.s_mu, &mut self.s_sigma, &mut self.n, &mut self.z]
            .into_iter()
            .flatten()
        {
            b.extend(head.buffers_mut());
        }
        b
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub deconv1: ConvTranspose2d<T>,
    pub bn3: BatchNorm<T>,
    pub deconv2: ConvTranspose2d<T>,
    arch: ArchConfig,
    code_width: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(init: &mut Init, arch: &ArchConfig, latent: &LatentConfig) -> Self {
        let [w1, w2] = arch.conv_widths;
        let code_width = latent.code_width();
        Decoder {
            fc1: Linear::new(init, "decoder.fc1", code_width, arch.fc_width),
            bn1: BatchNorm::new(init, "decoder.bn1", arch.fc_width, arch.bn_eps, arch.bn_momentum),
            fc2: Linear::new(init, "decoder.fc2", arch.fc_width, arch.flat_width()),
            bn2: BatchNorm::new(init, "decoder.bn2", arch.flat_width(), arch.bn_eps, arch.bn_momentum),
            deconv1: ConvTranspose2d::new(init, "decoder.deconv1", w2, w1, arch.kernel, arch.stride),
            bn3: BatchNorm::new(init, "decoder.bn3", w1, arch.bn_eps, arch.bn_momentum),
            deconv2: ConvTranspose2d::new(init, "decoder.deconv2", w1, arch.channels, arch.kernel, arch.stride),
            arch: arch.clone(),
            code_width,
        }
    }

    fn run(&self, g: &mut Graph<T>, codes: Var, mode: Mode, sink: &mut Vec<BatchStats<T>>) -> Var {
        let h = self.fc1.forward(g, codes);
        let h = g.relu(h);
        let h = self.bn1.forward(g, h, mode, sink);
        let h = self.fc2.forward(g, h);
        let h = g.relu(h);
        let h = self.bn2.forward(g, h, mode, sink);
        let batch = g.shape(h)[0];
        let side = self.arch.bottleneck_side();
        let h = g.reshape(h, vec![batch, self.arch.conv_widths[1], side, side]);
        let h = self.deconv1.forward(g, h);
        let h = g.relu(h);
        let h = self.bn3.forward(g, h, mode, sink);
        let h = self.deconv2.forward(g, h);
        g.sigmoid(h)
    }

    pub fn forward_train(&mut self, g: &mut Graph<T>, codes: Var) -> Var {
        let mut sink = Vec::new();
        let out = self.run(g, codes, Mode::Train, &mut sink);
        commit_stats(vec![&mut self.bn1, &mut self.bn2, &mut self.bn3], sink);
        out
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, codes: Var) -> Var {
        self.run(g, codes, Mode::Eval, &mut Vec::new())
    }

    /// Batch statistics, leaving the running estimates untouched.
    pub fn forward_batch(&self, g: &mut Graph<T>, codes: Var) -> Var {
        self.run(g, codes, Mode::Train, &mut Vec::new())
    }

    pub fn forward(&mut self, g: &mut Graph<T>, codes: Var, mode: Mode) -> Var {
        match mode {
            Mode::Train => self.forward_train(g, codes),
            Mode::Eval => self.forward_eval(g, codes),
        }
    }

    /// Eval-mode decoding of `[B, code_width]` codes.
    pub fn decode(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        if codes.shape().len() != 2 || codes.shape()[1] != self.code_width {
            return Err(Error::shape(format!(
                "decoder expects codes [B, {}], got {:?}",
                self.code_width,
                codes.shape()
            )));
        }
        let mut g = Graph::new();
        let z = g.input(codes.clone());
        let y = self.forward_eval(&mut g, z);
        Ok(g.value(y).clone())
    }

    pub fn code_width(&self) -> usize {
        self.code_width
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        p.extend(self.fc1.params());
        p.extend(self.bn1.params());
        p.extend(self.fc2.params());
        p.extend(self.bn2.params());
        p.extend(self.deconv1.params());
        p.extend(self.bn3.params());
        p.extend(self.deconv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = Vec::new();
        p.extend(self.fc1.params_mut());
        p.extend(self.bn1.params_mut());
        p.extend(self.fc2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.deconv1.params_mut());
        p.extend(self.bn3.params_mut());
        p.extend(self.deconv2.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        b.extend(self.bn3.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut b = self.bn1.buffers_mut();
        b.extend(self.bn2.buffers_mut());
        b.extend(self.bn3.buffers_mut());
        b
    }
}

/// Raw-score critic on one latent slot.
#[derive(Clone, Debug)]
pub struct LatentCritic<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
    slope: f64,
    width: usize,
}

impl<T: Scalar> LatentCritic<T> {
    pub fn new(init: &mut Init, name: &str, slot_width: usize, arch: &ArchConfig) -> Self {
        let h = arch.critic_width;
        LatentCritic {
            fc1: Linear::new(init, &format!("{name}.fc1"), slot_width, h),
            fc2: Linear::new(init, &format!("{name}.fc2"), h, h),
            fc3: Linear::new(init, &format!("{name}.fc3"), h, 1),
            slope: arch.leaky_slope,
            width: slot_width,
        }
    }

    /// `[B, slot_width] -> [B, 1]` unbounded scores.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let slope = T::lit(self.slope);
        let h = self.fc1.forward(g, x);
        let h = g.leaky_relu(h, slope);
        let h = self.fc2.forward(g, h);
        let h = g.leaky_relu(h, slope);
        self.fc3.forward(g, h)
    }

    pub fn score(&self, values: &Tensor<T>) -> Result<Tensor<T>> {
        if values.shape().len() != 2 || values.shape()[1] != self.width {
            return Err(Error::shape(format!(
                "critic expects [B, {}], got {:?}",
                self.width,
                values.shape()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(values.clone());
        let y = self.forward(&mut g, x);
        Ok(g.value(y).clone())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Clamps every critic parameter into `[-clip, clip]`.
    pub fn clip_weights(&mut self, clip: f64) {
        assert!(clip > 0.0, "clip must be positive");
        let (lo, hi) = (T::lit(-clip), T::lit(clip));
        for p in self.params_mut() {
            for w in p.value.data_mut() {
                *w = w.max(lo).min(hi);
            }
        }
    }
}

impl<T: Scalar> Module<T> for LatentCritic<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.fc3.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p.extend(self.fc3.params_mut());
        p
    }
}

#[derive(Clone, Debug)]
pub struct ImageDiscriminator<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub fc: Linear<T>,
    pub bn_fc: BatchNorm<T>,
    pub out: Linear<T>,
    arch: ArchConfig,
}

impl<T: Scalar> ImageDiscriminator<T> {
    pub fn new(init: &mut Init, arch: &ArchConfig) -> Self {
        let [w1, w2] = arch.conv_widths;
        ImageDiscriminator {
            conv1: Conv2d::new(init, "disc_x.conv1", arch.channels, w1, arch.kernel, arch.stride),
            conv2: Conv2d::new(init, "disc_x.conv2", w1, w2, arch.kernel, arch.stride),
            bn2: BatchNorm::new(init, "disc_x.bn2", w2, arch.bn_eps, arch.bn_momentum),
            fc: Linear::new(init, "disc_x.fc", arch.flat_width(), arch.fc_width),
            bn_fc: BatchNorm::new(init, "disc_x.bn_fc", arch.fc_width, arch.bn_eps, arch.bn_momentum),
            out: Linear::new(init, "disc_x.out", arch.fc_width, 1),
            arch: arch.clone(),
        }
    }

    fn run(&self, g: &mut Graph<T>, x: Var, mode: Mode, sink: &mut Vec<BatchStats<T>>) -> Var {
        let slope = T::lit(self.arch.leaky_slope);
        let h = self.conv1.forward(g, x);
        let h = g.leaky_relu(h, slope);
        let h = self.conv2.forward(g, h);
        let h = g.leaky_relu(h, slope);
        let h = self.bn2.forward(g, h, mode, sink);
        let batch = g.shape(h)[0];
        let h = g.reshape(h, vec![batch, self.arch.flat_width()]);
        let h = self.fc.forward(g, h);
        let h = g.leaky_relu(h, slope);
        let h = self.bn_fc.forward(g, h, mode, sink);
        let h = self.out.forward(g, h);
        g.sigmoid(h)
    }

    pub fn forward_train(&mut self, g: &mut Graph<T>, images: Var) -> Var {
        let mut sink = Vec::new();
        let out = self.run(g, images, Mode::Train, &mut sink);
        commit_stats(vec![&mut self.bn2, &mut self.bn_fc], sink);
        out
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, images: Var) -> Var {
        self.run(g, images, Mode::Eval, &mut Vec::new())
    }

    /// Batch statistics, leaving the running estimates untouched.
    pub fn forward_batch(&self, g: &mut Graph<T>, images: Var) -> Var {
        self.run(g, images, Mode::Train, &mut Vec::new())
    }

    pub fn forward(&mut self, g: &mut Graph<T>, images: Var, mode: Mode) -> Var {
        match mode {
            Mode::Train => self.forward_train(g, images),
            Mode::Eval => self.forward_eval(g, images),
        }
    }

    /// Eval-mode probabilities `[B, 1]` that each image is real.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(&self.arch, images)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let y = self.forward_eval(&mut g, x);
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> Module<T> for ImageDiscriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p.extend(self.fc.params());
        p.extend(self.bn_fc.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p.extend(self.fc.params_mut());
        p.extend(self.bn_fc.params_mut());
        p.extend(self.out.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.bn2.buffers();
        b.extend(self.bn_fc.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut b = self.bn2.buffers_mut();
        b.extend(self.bn_fc.buffers_mut());
        b
    }
}

#[derive(Clone, Debug)]
pub struct SlotCritic<T> {
    pub slot: Slot,
    pub critic: LatentCritic<T>,
}

/// Every learnable network of the model. The encoder and decoder are single
/// instances used by both training phases.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub latent: LatentConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub critics: Vec<SlotCritic<T>>,
    pub disc_x: ImageDiscriminator<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal weights (two-sigma cut), zero biases, unit
    /// batch-norm scales. Deterministic under `rng`.
    pub fn init(arch: &ArchConfig, latent: &LatentConfig, rng: &mut Stream) -> Result<Self> {
        arch.validate()?;
        latent.validate()?;
        let mut init = Init::new(rng, arch.init_std);
        let encoder = Encoder::new(&mut init, arch, latent);
        let decoder = Decoder::new(&mut init, arch, latent);
        let critics = Slot::active(latent)
            .into_iter()
            .map(|(slot, width)| SlotCritic {
                slot,
                critic: LatentCritic::new(&mut init, &format!("critic_{}", slot.tag()), width, arch),
            })
            .collect();
        let disc_x = ImageDiscriminator::new(&mut init, arch);
        Ok(ModelParams {
            arch: arch.clone(),
            latent: latent.clone(),
            encoder,
            decoder,
            critics,
            disc_x,
        })
    }

    pub fn critic(&self, slot: Slot) -> Option<&LatentCritic<T>> {
        self.critics.iter().find(|c| c.slot == slot).map(|c| &c.critic)
    }

    pub fn critic_mut(&mut self, slot: Slot) -> Option<&mut LatentCritic<T>> {
        self.critics.iter_mut().find(|c| c.slot == slot).map(|c| &mut c.critic)
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<EncoderOutput<T>> {
        self.encoder.encode(images)
    }

    pub fn decode(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.decode(codes)
    }

    pub fn critic_z(&self, slot: Slot, values: &Tensor<T>) -> Result<Tensor<T>> {
        self.critic(slot)
            .ok_or_else(|| Error::config(format!("no critic for slot {}", slot.tag())))?
            .score(values)
    }

    pub fn discriminate_x(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.disc_x.discriminate(images)
    }

    pub fn clip_critic_weights(&mut self, clip: f64) {
        for c in &mut self.critics {
            c.critic.clip_weights(clip);
        }
    }

    pub fn critics_checksum(&self) -> u64 {
        let mut h = crate::nn::Fnv::default();
        for c in &self.critics {
            h.bytes(&c.critic.checksum().to_le_bytes());
        }
        h.0
    }

    /// Every parameter and buffer under its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut out: Vec<(&str, &Tensor<T>)> = Vec::new();
        for p in self.params() {
            out.push((&p.name, &p.value));
        }
        for b in self.buffers() {
            out.push((&b.name, &b.value));
        }
        out
    }

    /// Overwrites every parameter and buffer from `tensors`. Every name must
    /// be present with a matching shape; extra names are rejected.
    pub fn load_named_tensors(&mut self, mut tensors: HashMap<String, Tensor<T>>) -> Result<()> {
        fn take<T: Scalar>(map: &mut HashMap<String, Tensor<T>>, name: &str, slot: &mut Tensor<T>) -> Result<()> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::shape(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
            Ok(())
        }
        for p in self.params_mut() {
            take(&mut tensors, &p.name, &mut p.value)?;
        }
        for b in self.buffers_mut() {
            take(&mut tensors, &b.name, &mut b.value)?;
        }
        if let Some(extra) = tensors.keys().min() {
            return Err(Error::shape(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for ModelParams<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        for c in &self.critics {
            p.extend(c.critic.params());
        }
        p.extend(self.disc_x.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        for c in &mut self.critics {
            p.extend(c.critic.params_mut());
        }
        p.extend(self.disc_x.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.encoder.buffers();
        b.extend(self.decoder.buffers());
        b.extend(self.disc_x.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut b = self.encoder.buffers_mut();
        b.extend(self.decoder.buffers_mut());
        b.extend(self.disc_x.buffers_mut());
        b
    }
}

#[cfg(test)]
mod tests;
