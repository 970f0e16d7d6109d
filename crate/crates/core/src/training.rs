//! Alternating optimization of the two pipelines.
//!
//! A global step counter drives the schedule. For the hybrid model every
//! cycle is one x-Rep-x step followed by `rep_phase_multiplier` Rep-x-Rep
//! steps; the ablations run only their own phase. Each step consumes one
//! batch of real images.
//!
//! Optimizers: one Adam shared by encoder and decoder, one RMSProp shared by
//! the latent critics, one Adam for the image discriminator. Moments are
//! keyed by parameter id, so sharing is only a matter of learning rate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{batches_per_epoch, epoch_order, DatasetName, ImageSource};
use crate::error::{Error, Result};
use crate::latent::{reparameterize_var, sample_prior, sample_slot, standard_normal, LatentBatch, LatentConfig};
use crate::losses::{
    adv_x_disc_loss, adv_x_gen_loss, adv_z_critic_loss, adv_z_encoder_loss, rec_c, rec_s, rec_x, rec_z, LossReport,
    Phase,
};
use crate::networks::{ArchConfig, Encoded, EncoderVars, ModelParams, Slot};
use crate::nn::Module;
use crate::optim::Optimizer;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const INIT_KEY: u64 = 1;
const TRAIN_KEY: u64 = 2;
const DATA_KEY: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "repgan")]
    RepGan,
    #[serde(rename = "x-rep-x")]
    XRepX,
    #[serde(rename = "rep-x-rep")]
    RepXRep,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::XRepX, ModelKind::RepXRep, ModelKind::RepGan];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::RepGan => "repgan",
            ModelKind::XRepX => "x-rep-x",
            ModelKind::RepXRep => "rep-x-rep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == s.to_ascii_lowercase())
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Learning rates for (encoder + decoder, latent critics, image
/// discriminator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub generators: f64,
    pub dz: f64,
    pub dx: f64,
}

impl LearningRates {
    pub const MNIST: LearningRates = LearningRates {
        generators: 5e-4,
        dz: 1e-3,
        dx: 2e-4,
    };
    pub const FASHION_MNIST: LearningRates = LearningRates {
        generators: 5e-5,
        dz: 1e-3,
        dx: 2e-5,
    };
    /// Listed for completeness; SVHN ingestion is not implemented.
    pub const SVHN: LearningRates = LearningRates {
        generators: 1e-4,
        dz: 1e-3,
        dx: 2e-5,
    };

    pub fn for_dataset(name: DatasetName) -> Self {
        match name {
            DatasetName::Mnist => Self::MNIST,
            DatasetName::FashionMnist => Self::FASHION_MNIST,
        }
    }
}

/// Batch size, epochs, critic steps and the clip value are not given by the
/// method's description; the defaults are common GAN conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dataset: DatasetName,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides for the dataset's learning-rate preset.
    pub lr_generators: Option<f64>,
    pub lr_dz: Option<f64>,
    pub lr_dx: Option<f64>,
    pub rep_phase_multiplier: usize,
    /// Critic updates per encoder adversarial update, per slot.
    pub critic_steps: usize,
    pub clip: f64,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 checkpoints only at the end.
    pub checkpoint_every: u64,
    /// Stop after this many global steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Batches assembled ahead on a loader thread; 0 loads inline. Item
    /// order comes from the seed either way, so results do not depend on it.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::RepGan,
            dataset: DatasetName::Mnist,
            epochs: 30,
            batch_size: 64,
            lr_generators: None,
            lr_dz: None,
            lr_dx: None,
            rep_phase_multiplier: 5,
            critic_steps: 1,
            clip: 0.01,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
            prefetch: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rates(&self) -> LearningRates {
        let preset = LearningRates::for_dataset(self.dataset);
        LearningRates {
            generators: self.lr_generators.unwrap_or(preset.generators),
            dz: self.lr_dz.unwrap_or(preset.dz),
            dx: self.lr_dx.unwrap_or(preset.dx),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rates();
        for (name, v) in [("lr_generators", lr.generators), ("lr_dz", lr.dz), ("lr_dx", lr.dx)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.rep_phase_multiplier < 1 {
            return Err(Error::config("train.rep_phase_multiplier must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size must be at least 2 for batch norm"));
        }
        if self.critic_steps < 1 {
            return Err(Error::config("train.critic_steps must be at least 1"));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("train.clip must be positive"));
        }
        Ok(())
    }
}

/// Phase of global step `step` under the schedule.
pub fn phase_at(model: ModelKind, rep_phase_multiplier: usize, step: u64) -> Phase {
    match model {
        ModelKind::XRepX => Phase::XRepX,
        ModelKind::RepXRep => Phase::RepXRep,
        ModelKind::RepGan => {
            if step % (rep_phase_multiplier as u64 + 1) == 0 {
                Phase::XRepX
            } else {
                Phase::RepXRep
            }
        }
    }
}

/// Item order stream for `epoch` of a run seeded with `seed`.
pub fn data_stream(seed: u64, epoch: usize) -> Stream {
    Stream::from_seed(seed).derive(DATA_KEY).derive(epoch as u64)
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub opt_generators: Optimizer<T>,
    pub opt_dz: Optimizer<T>,
    pub opt_dx: Optimizer<T>,
    pub rng: Stream,
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
}

fn finite<T: Scalar>(g: &Graph<T>, v: Var, step: u64, phase: Phase, what: &str) -> Result<f64> {
    let x = g.value(v).item().as_f64();
    if !x.is_finite() {
        return Err(Error::Divergence {
            step,
            phase: phase.tag().into(),
            detail: format!("{what} = {x}"),
        });
    }
    Ok(x)
}

/// Graph value of `slot` given encoder outputs; `s` is reparameterized
/// with `eps`.
fn slot_var<T: Scalar>(g: &mut Graph<T>, enc: &EncoderVars, slot: Slot, eps: &Tensor<T>) -> Var {
    match (enc, slot) {
        (Encoded::Disentangled { c_probs, .. }, Slot::Categorical) => *c_probs,
        (Encoded::Disentangled { s_mu, s_sigma, .. }, Slot::Continuous) => {
            reparameterize_var(g, *s_mu, *s_sigma, eps.clone())
        }
        (Encoded::Disentangled { n, .. }, Slot::Noise) => *n,
        (Encoded::Entangled { z }, Slot::Entangled) => *z,
        (_, slot) => panic!("slot {} does not match the encoder output", slot.tag()),
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig, arch: &ArchConfig, latent: &LatentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Stream::from_seed(cfg.seed);
        let params = ModelParams::init(arch, latent, &mut root.derive(INIT_KEY))?;
        let lr = cfg.learning_rates();
        Ok(TrainState {
            params,
            opt_generators: Optimizer::adam(lr.generators),
            opt_dz: Optimizer::rmsprop(lr.dz),
            opt_dx: Optimizer::adam(lr.dx),
            rng: root.derive(TRAIN_KEY),
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    fn check_batch(&self, images: &Tensor<T>) -> Result<usize> {
        let want = self.params.arch.image_shape(images.shape().first().copied().unwrap_or(0));
        if images.shape() != want {
            return Err(Error::shape(format!(
                "training batch {:?}, expected {want:?}",
                images.shape()
            )));
        }
        if want[0] < 2 {
            return Err(Error::config("training batches need at least two images"));
        }
        Ok(want[0])
    }

    /// Data → latent → data. Per slot: critic update(s) on prior draws vs.
    /// encoder outputs, weight clipping, then an encoder update against the
    /// refreshed critic. Finally encoder and decoder are updated on the
    /// image reconstruction error, with `s` reparameterized and `n` passed
    /// through.
    pub fn x_rep_x_step(&mut self, cfg: &TrainConfig, images: &Tensor<T>) -> Result<LossReport> {
        let phase = Phase::XRepX;
        let step = self.step;
        let b = self.check_batch(images)?;
        let latent = self.params.latent.clone();
        let mut report = LossReport::new(step, phase);
        let eps: Tensor<T> = standard_normal(&[b, latent.ks], &mut self.rng);

        for ci in 0..self.params.critics.len() {
            let slot = self.params.critics[ci].slot;
            let mut g = Graph::new();
            let x = g.input(images.clone());
            let enc = self.params.encoder.forward_batch(&mut g, x);
            let v = slot_var(&mut g, &enc, slot, &eps);
            let encoded = g.value(v).clone();

            for _ in 0..cfg.critic_steps {
                let prior: Tensor<T> = sample_slot(&latent, slot, b, &mut self.rng);
                let critic = &self.params.critics[ci].critic;
                let mut gc = Graph::new();
                let p = gc.input(prior);
                let e = gc.input(encoded.clone());
                let sp = critic.forward(&mut gc, p);
                let se = critic.forward(&mut gc, e);
                let loss = adv_z_critic_loss(&mut gc, sp, se);
                finite(&gc, loss, step, phase, &format!("critic_{} loss", slot.tag()))?;
                let grads = gc.backward(loss);
                drop(gc);
                let critic = &mut self.params.critics[ci].critic;
                self.opt_dz.step(critic.params_mut(), &grads);
                critic.clip_weights(cfg.clip);
            }

            let se = self.params.critics[ci].critic.forward(&mut g, v);
            let loss = adv_z_encoder_loss(&mut g, se);
            let value = finite(&g, loss, step, phase, &format!("adv_{}", slot.tag()))?;
            match slot {
                Slot::Categorical => report.adv_c = value,
                Slot::Continuous | Slot::Entangled => report.adv_s = value,
                Slot::Noise => report.adv_n = value,
            }
            let grads = g.backward(loss);
            drop(g);
            self.opt_generators.step(self.params.encoder.params_mut(), &grads);
        }

        let mut g = Graph::new();
        let x = g.input(images.clone());
        let enc = self.params.encoder.forward_train(&mut g, x);
        let code = match enc {
            Encoded::Disentangled { c_probs, s_mu, s_sigma, n } => {
                let s = reparameterize_var(&mut g, s_mu, s_sigma, eps);
                g.concat_cols(&[c_probs, s, n])
            }
            Encoded::Entangled { z } => z,
        };
        let x_hat = self.params.decoder.forward_train(&mut g, code);
        let loss = rec_x(&mut g, x, x_hat)?;
        report.rec_x = finite(&g, loss, step, phase, "rec_x")?;
        let grads = g.backward(loss);
        drop(g);
        let ModelParams { encoder, decoder, .. } = &mut self.params;
        self.opt_generators
            .step(encoder.params_mut().into_iter().chain(decoder.params_mut()), &grads);
        Ok(report)
    }

    /// Latent → data → latent. The image discriminator is updated on real
    /// vs. generated images, the decoder on the generator loss, then encoder
    /// and decoder on recovering the sampled `c` and `s` (never `n`).
    pub fn rep_x_rep_step(&mut self, _cfg: &TrainConfig, images: &Tensor<T>) -> Result<LossReport> {
        let phase = Phase::RepXRep;
        let step = self.step;
        let b = self.check_batch(images)?;
        let latent = self.params.latent.clone();
        let mut report = LossReport::new(step, phase);
        let prior: LatentBatch<T> = sample_prior(&latent, b, &mut self.rng);
        let codes = prior.concat();

        let fake = {
            let mut g = Graph::new();
            let z = g.input(codes.clone());
            let y = self.params.decoder.forward_batch(&mut g, z);
            g.value(y).clone()
        };
        let mut g = Graph::new();
        let xr = g.input(images.clone());
        let xf = g.input(fake);
        let dr = self.params.disc_x.forward_train(&mut g, xr);
        let df = self.params.disc_x.forward_batch(&mut g, xf);
        let loss = adv_x_disc_loss(&mut g, dr, df);
        finite(&g, loss, step, phase, "disc_x loss")?;
        let grads = g.backward(loss);
        drop(g);
        self.opt_dx.step(self.params.disc_x.params_mut(), &grads);

        let mut g = Graph::new();
        let z = g.input(codes.clone());
        let y = self.params.decoder.forward_train(&mut g, z);
        let d = self.params.disc_x.forward_batch(&mut g, y);
        let loss = adv_x_gen_loss(&mut g, d);
        report.adv_x = finite(&g, loss, step, phase, "adv_x")?;
        let grads = g.backward(loss);
        drop(g);
        self.opt_generators.step(self.params.decoder.params_mut(), &grads);

        let mut g = Graph::new();
        let z = g.input(codes);
        let y = self.params.decoder.forward_batch(&mut g, z);
        let enc = self.params.encoder.forward_train(&mut g, y);
        let loss = match (enc, prior) {
            (
                Encoded::Disentangled {
                    c_probs, s_mu, s_sigma, ..
                },
                LatentBatch::Disentangled { c, s, .. },
            ) => {
                let c = g.input(c);
                let s = g.input(s);
                let lc = rec_c(&mut g, c, c_probs)?;
                let ls = rec_s(&mut g, s, s_mu, s_sigma)?;
                report.rec_c = finite(&g, lc, step, phase, "rec_c")?;
                report.rec_s = finite(&g, ls, step, phase, "rec_s")?;
                g.add(lc, ls)
            }
            (Encoded::Entangled { z: z_hat }, LatentBatch::Entangled { z }) => {
                let z = g.input(z);
                let lz = rec_z(&mut g, z, z_hat)?;
                report.rec_s = finite(&g, lz, step, phase, "rec_z")?;
                lz
            }
            _ => unreachable!("encoder and prior follow the same latent config"),
        };
        let grads = g.backward(loss);
        drop(g);
        let ModelParams { encoder, decoder, .. } = &mut self.params;
        self.opt_generators
            .step(encoder.params_mut().into_iter().chain(decoder.params_mut()), &grads);
        Ok(report)
    }

    /// Runs the phase the schedule assigns to the current step and advances
    /// the step counter.
    pub fn train_step(&mut self, cfg: &TrainConfig, images: &Tensor<T>) -> Result<LossReport> {
        let report = match phase_at(cfg.model, cfg.rep_phase_multiplier, self.step) {
            Phase::XRepX => self.x_rep_x_step(cfg, images)?,
            Phase::RepXRep => self.rep_x_rep_step(cfg, images)?,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Receives progress from [`run`].
pub trait Observer<T> {
    fn on_step(&mut self, _report: &LossReport, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

/// Keeps every report.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<u64>,
}

impl<T> Observer<T> for History {
    fn on_step(&mut self, report: &LossReport, _state: &TrainState<T>) -> Result<()> {
        self.reports.push(report.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<T>) -> Result<()> {
        self.checkpoints.push(state.step);
        Ok(())
    }
}

impl History {
    pub fn count(&self, phase: Phase) -> usize {
        self.reports.iter().filter(|r| r.phase == phase).count()
    }
}

/// Continues `state` until `cfg.epochs` epochs or `cfg.max_steps` steps.
/// Only image tensors are read from `data`.
pub fn run<T: Scalar, S: ImageSource<T> + Sync + ?Sized>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &S,
    observer: &mut dyn Observer<T>,
) -> Result<()> {
    cfg.validate()?;
    let (channels, side) = data.image_shape();
    let arch = &state.params.arch;
    if channels != arch.channels || side != arch.image_side {
        return Err(Error::config(format!(
            "data images are {channels}x{side}x{side}, architecture expects {}x{}x{}",
            arch.channels, arch.image_side, arch.image_side
        )));
    }
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} training images",
            cfg.batch_size,
            data.len()
        )));
    }
    while state.epoch < cfg.epochs {
        let order = epoch_order(data.len(), true, &mut data_stream(cfg.seed, state.epoch));
        let chunks: Vec<&[usize]> = order
            .chunks_exact(cfg.batch_size)
            .skip(state.batch_in_epoch)
            .collect();
        let stopped = if cfg.prefetch == 0 {
            epoch(state, cfg, chunks.into_iter().map(|idx| data.images(idx)), observer)?
        } else {
            std::thread::scope(|scope| {
                let (tx, rx) = std::sync::mpsc::sync_channel(cfg.prefetch);
                scope.spawn(move || {
                    for idx in chunks {
                        if tx.send(data.images(idx)).is_err() {
                            break;
                        }
                    }
                });
                epoch(state, cfg, rx.into_iter(), observer)
            })?
        };
        if stopped {
            return observer.on_checkpoint(state);
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
    }
    observer.on_checkpoint(state)
}

/// Steps through the remaining batches of one epoch. Returns true when
/// `max_steps` cut it short.
fn epoch<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    batches: impl Iterator<Item = Tensor<T>>,
    observer: &mut dyn Observer<T>,
) -> Result<bool> {
    for images in batches {
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            return Ok(true);
        }
        let report = state.train_step(cfg, &images)?;
        state.batch_in_epoch += 1;
        observer.on_step(&report, state)?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(state)?;
        }
    }
    Ok(false)
}

/// Fresh state plus [`run`].
pub fn train<T: Scalar, S: ImageSource<T> + Sync + ?Sized>(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    latent: &LatentConfig,
    data: &S,
    observer: &mut dyn Observer<T>,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(cfg, arch, latent)?;
    run(&mut state, cfg, data, observer)?;
    Ok(state)
}

/// [`train`] with a single Gaussian latent of width `dim`.
pub fn train_entangled<T: Scalar, S: ImageSource<T> + Sync + ?Sized>(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    dim: usize,
    slot_variance: f64,
    data: &S,
    observer: &mut dyn Observer<T>,
) -> Result<TrainState<T>> {
    let latent = LatentConfig {
        slot_variance,
        ..LatentConfig::entangled(dim)
    };
    train(cfg, arch, &latent, data, observer)
}

#[cfg(test)]
mod tests;
