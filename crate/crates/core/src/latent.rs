//! Latent codes, their priors, and the reparameterization transform.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape and prior of the representation space.
///
/// Either the disentangled triple (categorical `c` of `kc` classes,
/// continuous `s` of width `ks`, noise `n` of width `kn`) or, when
/// `entangled_dim` is set, a single Gaussian vector `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub kc: usize,
    pub ks: usize,
    pub kn: usize,
    /// Prior variance of every Gaussian slot.
    pub slot_variance: f64,
    pub entangled_dim: Option<usize>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            kc: 10,
            ks: 2,
            kn: 20,
            slot_variance: 0.5,
            entangled_dim: None,
        }
    }
}

impl LatentConfig {
    pub fn entangled(dim: usize) -> Self {
        LatentConfig {
            entangled_dim: Some(dim),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slot_variance > 0.0 && self.slot_variance.is_finite()) {
            return Err(Error::config(format!(
                "latent.slot_variance must be positive, got {}",
                self.slot_variance
            )));
        }
        match self.entangled_dim {
            Some(0) => Err(Error::config("latent.entangled_dim must be at least 1")),
            Some(_) => Ok(()),
            None if self.kc < 2 => Err(Error::config(format!(
                "latent.kc must be at least 2, got {}",
                self.kc
            ))),
            None => Ok(()),
        }
    }

    pub fn is_entangled(&self) -> bool {
        self.entangled_dim.is_some()
    }

    /// Width of the concatenated code fed to the decoder.
    pub fn code_width(&self) -> usize {
        match self.entangled_dim {
            Some(d) => d,
            None => self.kc + self.ks + self.kn,
        }
    }
}

/// A batch of latent codes, each slot stored as a `[B, width]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentBatch<T> {
    Disentangled {
        c: Tensor<T>,
        s: Tensor<T>,
        n: Tensor<T>,
    },
    Entangled {
        z: Tensor<T>,
    },
}

impl<T: Scalar> LatentBatch<T> {
    pub fn len(&self) -> usize {
        match self {
            LatentBatch::Disentangled { c, .. } => c.rows(),
            LatentBatch::Entangled { z } => z.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decoder input: `c ‖ s ‖ n`, or `z`.
    pub fn concat(&self) -> Tensor<T> {
        match self {
            LatentBatch::Disentangled { c, s, n } => {
                Tensor::concat_cols(&[c, s, n]).expect("slots share the batch size")
            }
            LatentBatch::Entangled { z } => z.clone(),
        }
    }

    /// Splits a concatenated `[B, width]` code back into slots.
    pub fn split(cfg: &LatentConfig, codes: &Tensor<T>) -> Result<Self> {
        if codes.shape().len() != 2 || codes.shape()[1] != cfg.code_width() {
            return Err(Error::shape(format!(
                "latent codes {:?} do not match width {}",
                codes.shape(),
                cfg.code_width()
            )));
        }
        Ok(match cfg.entangled_dim {
            Some(_) => LatentBatch::Entangled { z: codes.clone() },
            None => LatentBatch::Disentangled {
                c: codes.slice_cols(0, cfg.kc),
                s: codes.slice_cols(cfg.kc, cfg.ks),
                n: codes.slice_cols(cfg.kc + cfg.ks, cfg.kn),
            },
        })
    }
}

/// A latent slot; each is matched to the prior by its own critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Categorical,
    Continuous,
    Noise,
    Entangled,
}

impl Slot {
    pub fn tag(self) -> &'static str {
        match self {
            Slot::Categorical => "c",
            Slot::Continuous => "s",
            Slot::Noise => "n",
            Slot::Entangled => "z",
        }
    }

    /// Slots present under `latent`, with their widths.
    pub fn active(latent: &LatentConfig) -> Vec<(Slot, usize)> {
        match latent.entangled_dim {
            Some(d) => vec![(Slot::Entangled, d)],
            None => [
                (Slot::Categorical, latent.kc),
                (Slot::Continuous, latent.ks),
                (Slot::Noise, latent.kn),
            ]
            .into_iter()
            .filter(|&(_, w)| w > 0)
            .collect(),
        }
    }
}

/// One-hot vector of length `kc` with a uniformly drawn hot index.
pub fn sample_categorical<T: Scalar>(kc: usize, rng: &mut Stream) -> Vec<T> {
    assert!(kc >= 2, "categorical slot needs at least two classes");
    let hot = rng.gen_range(0..kc);
    let mut v = vec![T::zero(); kc];
    v[hot] = T::one();
    v
}

/// `dim` i.i.d. draws from `N(0, variance)`.
pub fn sample_gaussian<T: Scalar>(dim: usize, variance: f64, rng: &mut Stream) -> Vec<T> {
    assert!(variance > 0.0, "gaussian variance must be positive");
    let sd = variance.sqrt();
    (0..dim)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            T::lit(e * sd)
        })
        .collect()
}

/// Draws `batch` codes from the prior described by `cfg`.
///
/// Per code the slots are drawn in order `c`, `s`, `n`.
pub fn sample_prior<T: Scalar>(cfg: &LatentConfig, batch: usize, rng: &mut Stream) -> LatentBatch<T> {
    match cfg.entangled_dim {
        Some(d) => {
            let mut z = Vec::with_capacity(batch * d);
            for _ in 0..batch {
                z.extend(sample_gaussian::<T>(d, cfg.slot_variance, rng));
            }
            LatentBatch::Entangled {
                z: Tensor::from_vec(vec![batch, d], z),
            }
        }
        None => {
            let mut c = Vec::with_capacity(batch * cfg.kc);
            let mut s = Vec::with_capacity(batch * cfg.ks);
            let mut n = Vec::with_capacity(batch * cfg.kn);
            for _ in 0..batch {
                c.extend(sample_categorical::<T>(cfg.kc, rng));
                s.extend(sample_gaussian::<T>(cfg.ks, cfg.slot_variance, rng));
                n.extend(sample_gaussian::<T>(cfg.kn, cfg.slot_variance, rng));
            }
            LatentBatch::Disentangled {
                c: Tensor::from_vec(vec![batch, cfg.kc], c),
                s: Tensor::from_vec(vec![batch, cfg.ks], s),
                n: Tensor::from_vec(vec![batch, cfg.kn], n),
            }
        }
    }
}

/// `[batch, width]` prior draws for one slot.
pub fn sample_slot<T: Scalar>(cfg: &LatentConfig, slot: Slot, batch: usize, rng: &mut Stream) -> Tensor<T> {
    let width = match slot {
        Slot::Categorical => cfg.kc,
        Slot::Continuous => cfg.ks,
        Slot::Noise => cfg.kn,
        Slot::Entangled => cfg.entangled_dim.expect("entangled slot needs entangled_dim"),
    };
    let mut data = Vec::with_capacity(batch * width);
    for _ in 0..batch {
        data.extend(match slot {
            Slot::Categorical => sample_categorical::<T>(width, rng),
            _ => sample_gaussian::<T>(width, cfg.slot_variance, rng),
        });
    }
    Tensor::from_vec(vec![batch, width], data)
}

/// Standard-normal noise of the given shape.
pub fn standard_normal<T: Scalar>(shape: &[usize], rng: &mut Stream) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    )
}

/// `mu + sigma ⊙ eps`.
pub fn reparameterize<T: Scalar>(mu: &[T], sigma: &[T], eps: &[T]) -> Result<Vec<T>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return Err(Error::shape(format!(
            "reparameterize lengths {}, {}, {}",
            mu.len(),
            sigma.len(),
            eps.len()
        )));
    }
    if let Some(bad) = sigma.iter().find(|s| !(**s > T::zero())) {
        return Err(Error::Domain(format!("sigma must be positive, got {bad}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(eps)
        .map(|((&m, &s), &e)| m + s * e)
        .collect())
}

/// Differentiable form of [`reparameterize`]; `eps` enters as a constant.
pub fn reparameterize_var<T: Scalar>(g: &mut Graph<T>, mu: Var, sigma: Var, eps: Tensor<T>) -> Var {
    let e = g.input(eps);
    let scaled = g.mul(sigma, e);
    g.add(mu, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;

    #[test]
    fn one_hot_has_single_one() {
        let mut rng = Stream::from_seed(0);
        for _ in 0..100 {
            let v: Vec<f64> = sample_categorical(10, &mut rng);
            assert_eq!(v.iter().sum::<f64>(), 1.0);
            assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 9);
        }
    }

    #[test]
    fn categorical_is_deterministic_per_seed() {
        let a: Vec<f32> = sample_categorical(10, &mut Stream::from_seed(42));
        let b: Vec<f32> = sample_categorical(10, &mut Stream::from_seed(42));
        assert_eq!(a, b);
    }

    #[test]
    fn binary_category_frequency() {
        // 4 sigma of Binomial(10000, 0.5) / 10000 is 0.02.
        let mut rng = Stream::from_seed(5);
        let ones = (0..10_000)
            .filter(|_| sample_categorical::<f64>(2, &mut rng)[0] == 1.0)
            .count();
        let p = ones as f64 / 10_000.0;
        assert!((p - 0.5).abs() <= 0.02, "frequency {p}");
    }

    #[test]
    fn gaussian_is_bit_identical_per_seed() {
        let a: Vec<f64> = sample_gaussian(16, 0.5, &mut Stream::from_seed(8));
        let b: Vec<f64> = sample_gaussian(16, 0.5, &mut Stream::from_seed(8));
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_variance_rejected() {
        let cfg = LatentConfig {
            slot_variance: 0.0,
            ..LatentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(LatentConfig {
            kc: 1,
            ..LatentConfig::default()
        }
        .validate()
        .is_err());
        assert!(LatentConfig::entangled(0).validate().is_err());
    }

    #[test]
    fn prior_shapes() {
        let mut rng = Stream::from_seed(1);
        let batch = sample_prior::<f32>(&LatentConfig::default(), 64, &mut rng);
        match &batch {
            LatentBatch::Disentangled { c, s, n } => {
                assert_eq!(c.shape(), &[64, 10]);
                assert_eq!(s.shape(), &[64, 2]);
                assert_eq!(n.shape(), &[64, 20]);
                for r in 0..64 {
                    assert_eq!(c.row(r).iter().sum::<f32>(), 1.0);
                }
            }
            _ => panic!("expected disentangled"),
        }
        assert_eq!(batch.concat().shape(), &[64, 32]);

        let z = sample_prior::<f32>(&LatentConfig::entangled(32), 8, &mut rng);
        assert!(matches!(&z, LatentBatch::Entangled { z } if z.shape() == [8, 32]));
    }

    #[test]
    fn split_inverts_concat() {
        let cfg = LatentConfig::default();
        let batch = sample_prior::<f64>(&cfg, 5, &mut Stream::from_seed(2));
        assert_eq!(LatentBatch::split(&cfg, &batch.concat()).unwrap(), batch);
    }

    #[test]
    fn reparameterize_examples() {
        assert_eq!(reparameterize(&[1.0, 2.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&[0.0, 0.0], &[2.0, 2.0], &[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
        assert!(reparameterize(&[0.0], &[0.0], &[1.0]).is_err());
        assert!(reparameterize(&[0.0], &[-1.0], &[1.0]).is_err());
        assert!(reparameterize(&[0.0, 1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn reparameterize_gradients_match_finite_differences() {
        // d/dmu = I, d/dsigma = diag(eps): probe each output coordinate.
        let mu = Tensor::from_vec(vec![1, 3], vec![0.3, -1.2, 2.0]);
        let sigma = Tensor::from_vec(vec![1, 3], vec![0.5, 1.5, 0.9]);
        let eps = Tensor::from_vec(vec![1, 3], vec![0.7, -0.4, 1.3]);
        for out in 0..3 {
            let eps = eps.clone();
            let r = check_inputs(
                &[mu.clone(), sigma.clone()],
                move |g, v| {
                    let y = reparameterize_var(g, v[0], v[1], eps.clone());
                    g.slice_cols(y, out, 1)
                },
                1e-5,
                3,
            );
            assert!(r.passes(1e-4), "{r:?}");
        }
        let mut g = Graph::<f64>::new();
        let (m, s) = (g.variable(mu), g.variable(sigma));
        let y = reparameterize_var(&mut g, m, s, eps.clone());
        let y = g.sum(y);
        let grads = g.backward(y);
        assert_eq!(grads.var(m).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.var(s).unwrap().data(), eps.data());
    }
}
