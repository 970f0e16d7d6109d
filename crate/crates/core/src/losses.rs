//! The seven loss terms, as differentiable scalars on a [`Graph`].
//!
//! Every function returns a `[]`-shaped variable. Batch averages divide by
//! the number of rows; `rec_x` additionally divides by the pixel count.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn same_shape<T: Scalar>(g: &Graph<T>, what: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn batch_mean<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let rows = g.shape(x).first().copied().unwrap_or(1).max(1);
    let total = g.sum(x);
    g.scale(total, T::one() / T::from_count(rows))
}

/// Per-pixel mean squared error.
pub fn rec_x<T: Scalar>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    same_shape(g, "rec_x", x, x_hat)?;
    let d = g.sub(x_hat, x);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Cross-entropy of predicted class probabilities against one-hot targets.
pub fn rec_c<T: Scalar>(g: &mut Graph<T>, c_true: Var, c_probs: Var) -> Result<Var> {
    same_shape(g, "rec_c", c_true, c_probs)?;
    let logp = g.log(c_probs, T::lit(PROB_FLOOR));
    let picked = g.mul(c_true, logp);
    let ce = g.neg(picked);
    Ok(batch_mean(g, ce))
}

/// Gaussian negative log-likelihood of `s` under `N(mu, diag(sigma²))`,
/// summed over dimensions.
pub fn rec_s<T: Scalar>(g: &mut Graph<T>, s: Var, mu: Var, sigma: Var) -> Result<Var> {
    same_shape(g, "rec_s", s, mu)?;
    same_shape(g, "rec_s", s, sigma)?;
    if let Some(bad) = g.value(sigma).data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::Domain(format!("rec_s sigma must be positive, got {bad}")));
    }
    let log_sigma = g.log(sigma, T::min_positive_value());
    let inv_sigma = {
        let neg = g.neg(log_sigma);
        g.exp(neg)
    };
    let diff = g.sub(s, mu);
    let z = g.mul(diff, inv_sigma);
    let quad = g.square(z);
    let quad = g.scale(quad, T::lit(0.5));
    let per = g.add(log_sigma, quad);
    let per = g.offset(per, T::lit(0.5 * std::f64::consts::TAU.ln()));
    Ok(batch_mean(g, per))
}

/// Squared error between a sampled entangled code and its re-encoding,
/// summed over dimensions and averaged over the batch.
pub fn rec_z<T: Scalar>(g: &mut Graph<T>, z: Var, z_hat: Var) -> Result<Var> {
    same_shape(g, "rec_z", z, z_hat)?;
    let d = g.sub(z_hat, z);
    let sq = g.square(d);
    Ok(batch_mean(g, sq))
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn adv_x_disc_loss<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Var {
    let floor = T::lit(PROB_FLOOR);
    let log_real = g.log(d_real, floor);
    let real_term = g.mean(log_real);
    let one_minus = {
        let neg = g.neg(d_fake);
        g.offset(neg, T::one())
    };
    let log_not_fake = g.log(one_minus, floor);
    let fake_term = g.mean(log_not_fake);
    let both = g.add(real_term, fake_term);
    g.neg(both)
}

/// Non-saturating generator loss `-mean(log d_fake)`.
pub fn adv_x_gen_loss<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Var {
    let log_fake = g.log(d_fake, T::lit(PROB_FLOOR));
    let m = g.mean(log_fake);
    g.neg(m)
}

/// Image discriminator losses from probabilities: `(disc_loss, gen_loss)`.
pub fn adv_x_losses<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let disc = adv_x_disc_loss(g, d_real, d_fake);
    let gen = adv_x_gen_loss(g, d_fake);
    (disc, gen)
}

/// `mean(scores_encoded) - mean(scores_prior)`; minimizing it widens the
/// critic's margin in favor of prior samples.
pub fn adv_z_critic_loss<T: Scalar>(g: &mut Graph<T>, scores_prior: Var, scores_encoded: Var) -> Var {
    let prior = g.mean(scores_prior);
    let encoded = g.mean(scores_encoded);
    g.sub(encoded, prior)
}

/// `-mean(scores_encoded)`.
pub fn adv_z_encoder_loss<T: Scalar>(g: &mut Graph<T>, scores_encoded: Var) -> Var {
    let encoded = g.mean(scores_encoded);
    g.neg(encoded)
}

/// Wasserstein critic losses from raw scores: `(critic_loss, encoder_loss)`.
pub fn adv_z_losses<T: Scalar>(g: &mut Graph<T>, scores_prior: Var, scores_encoded: Var) -> (Var, Var) {
    let critic = adv_z_critic_loss(g, scores_prior, scores_encoded);
    let encoder = adv_z_encoder_loss(g, scores_encoded);
    (critic, encoder)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "x-Rep-x")]
    XRepX,
    #[serde(rename = "Rep-x-Rep")]
    RepXRep,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::XRepX => "x-Rep-x",
            Phase::RepXRep => "Rep-x-Rep",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "x-Rep-x" => Some(Phase::XRepX),
            "Rep-x-Rep" => Some(Phase::RepXRep),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Loss values from one training step. Terms a phase does not compute are
/// zero. `adv_c`, `adv_s`, `adv_n` hold the encoder-side Wasserstein losses
/// of each slot; in the entangled variant the single z slot reports under
/// `adv_s` and its latent reconstruction under `rec_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: Phase,
    pub adv_c: f64,
    pub adv_s: f64,
    pub adv_n: f64,
    pub adv_x: f64,
    pub rec_x: f64,
    pub rec_c: f64,
    pub rec_s: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = ["adv_c", "adv_s", "adv_n", "adv_x", "rec_x", "rec_c", "rec_s"];

    pub fn new(step: u64, phase: Phase) -> Self {
        LossReport {
            step,
            phase,
            adv_c: 0.0,
            adv_s: 0.0,
            adv_n: 0.0,
            adv_x: 0.0,
            rec_x: 0.0,
            rec_c: 0.0,
            rec_s: 0.0,
        }
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.adv_c, self.adv_s, self.adv_n, self.adv_x, self.rec_x, self.rec_c, self.rec_s,
        ]
    }

    /// First non-finite field, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, v)| (*n, v))
    }
}
