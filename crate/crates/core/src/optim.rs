//! Adam and RMSProp with per-parameter state keyed by [`ParamId`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    RmsProp { rho: f64, eps: f64 },
}

impl Rule {
    /// Adam with `beta1 = 0.5`, the usual setting for adversarial training.
    pub const ADAM: Rule = Rule::Adam {
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub const RMSPROP: Rule = Rule::RmsProp { rho: 0.99, eps: 1e-8 };

    fn moments(&self) -> usize {
        match self {
            Rule::Adam { .. } => 2,
            Rule::RmsProp { .. } => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    rule: Rule,
    lr: f64,
    steps: u64,
    state: BTreeMap<ParamId, Moments<T>>,
}

/// Per-parameter update count and running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub updates: u64,
    pub tensors: Vec<Tensor<T>>,
}

/// Plain-data snapshot of an optimizer for checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub rule: Rule,
    pub lr: f64,
    pub steps: u64,
    pub moments: Vec<(ParamId, Moments<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(rule: Rule, lr: f64) -> Self {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        Optimizer {
            rule,
            lr,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(Rule::ADAM, lr)
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self::new(Rule::RMSPROP, lr)
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter in `params` that has a
    /// gradient in `grads`. Returns how many were updated. Bias correction
    /// counts each parameter's own updates, so parameters that share an
    /// optimizer but are stepped at different rates stay independent.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>) -> usize
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
        T: 'a,
    {
        self.steps += 1;
        let lr = T::lit(self.lr);
        let mut updated = 0;
        for p in params {
            let Some(grad) = grads.param(p.id) else { continue };
            assert_eq!(grad.shape(), p.value.shape(), "gradient shape for {}", p.name);
            let slot = self.state.entry(p.id).or_insert_with(|| Moments {
                updates: 0,
                tensors: vec![Tensor::zeros(p.value.shape().to_vec()); self.rule.moments()],
            });
            slot.updates += 1;
            let t = slot.updates.min(i32::MAX as u64) as i32;
            let moments = &mut slot.tensors;
            match self.rule {
                Rule::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::one() - T::lit(beta1.powi(t));
                    let c2 = T::one() - T::lit(beta2.powi(t));
                    let [m, v] = &mut moments[..] else { unreachable!() };
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                Rule::RmsProp { rho, eps } => {
                    let (rho, eps) = (T::lit(rho), T::lit(eps));
                    let v = moments[0].data_mut();
                    for ((w, &g), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v) {
                        *v = rho * *v + (T::one() - rho) * g * g;
                        *w -= lr * g / (v.sqrt() + eps);
                    }
                }
            }
            updated += 1;
        }
        updated
    }

    pub fn export(&self) -> OptimizerState<T> {
        OptimizerState {
            rule: self.rule,
            lr: self.lr,
            steps: self.steps,
            moments: self.state.iter().map(|(id, m)| (*id, m.clone())).collect(),
        }
    }

    pub fn import(state: OptimizerState<T>) -> Result<Self> {
        let want = state.rule.moments();
        if let Some((id, m)) = state.moments.iter().find(|(_, m)| m.tensors.len() != want) {
            return Err(Error::shape(format!(
                "optimizer state for param {}: expected {want} moments, got {}",
                id.0,
                m.tensors.len()
            )));
        }
        if !(state.lr > 0.0) {
            return Err(Error::config("optimizer learning rate must be positive"));
        }
        Ok(Optimizer {
            rule: state.rule,
            lr: state.lr,
            steps: state.steps,
            state: state.moments.into_iter().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::Init;
    use crate::rng::Stream;

    fn param(id: u32, values: &[f64]) -> Param<f64> {
        Param {
            id: ParamId(id),
            name: format!("p{id}"),
            value: Tensor::from_vec(vec![values.len()], values.to_vec()),
        }
    }

    /// Gradients of `sum(w ⊙ w ⊙ k)` for the given params.
    fn quad_grads(params: &[&Param<f64>], k: f64) -> Gradients<f64> {
        let mut g = Graph::new();
        let mut total = None;
        for p in params {
            let w = p.var(&mut g);
            let sq = g.square(w);
            let s = g.sum(sq);
            let s = g.scale(s, k);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        g.backward(total.unwrap())
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let mut p = param(0, &[1.0, -2.0, 0.5]);
        let mut opt = Optimizer::adam(0.1);
        let (b1, b2, eps, lr) = (0.5f64, 0.999f64, 1e-8, 0.1);
        let mut w = vec![1.0, -2.0, 0.5];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        for t in 1..=6 {
            let grads = quad_grads(&[&p], 3.0);
            opt.step([&mut p], &grads);
            for i in 0..3 {
                let g = 6.0 * w[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
            for i in 0..3 {
                assert!((p.value.data()[i] - w[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param(0, &[3.0, -4.0]);
        let mut opt = Optimizer::adam(0.01);
        let grads = quad_grads(&[&p], 1.0);
        opt.step([&mut p], &grads);
        assert!((p.value.data()[0] - 2.99).abs() < 1e-9);
        assert!((p.value.data()[1] + 3.99).abs() < 1e-9);
    }

    #[test]
    fn rmsprop_matches_scalar_oracle() {
        let mut p = param(1, &[0.7, -0.1]);
        let mut opt = Optimizer::rmsprop(0.05);
        let mut w = vec![0.7, -0.1];
        let mut v = vec![0.0f64; 2];
        for _ in 0..5 {
            let grads = quad_grads(&[&p], 1.0);
            opt.step([&mut p], &grads);
            for i in 0..2 {
                let g = 2.0 * w[i];
                v[i] = 0.99 * v[i] + 0.01 * g * g;
                w[i] -= 0.05 * g / (v[i].sqrt() + 1e-8);
                assert!((p.value.data()[i] - w[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_without_gradients_are_untouched() {
        let mut a = param(0, &[1.0]);
        let mut b = param(1, &[2.0]);
        let grads = quad_grads(&[&a], 1.0);
        let mut opt = Optimizer::adam(0.1);
        assert_eq!(opt.step([&mut a, &mut b], &grads), 1);
        assert_eq!(b.value.data(), &[2.0]);
        assert_eq!(opt.export().moments.len(), 1);
    }

    #[test]
    fn bias_correction_is_per_parameter() {
        // b joins after a has been stepped twice; its first update must
        // still move it by exactly lr.
        let mut a = param(0, &[1.0]);
        let mut b = param(1, &[5.0]);
        let mut opt = Optimizer::adam(0.01);
        for _ in 0..2 {
            let grads = quad_grads(&[&a], 1.0);
            opt.step([&mut a], &grads);
        }
        let grads = quad_grads(&[&a, &b], 1.0);
        opt.step([&mut a, &mut b], &grads);
        assert!((b.value.data()[0] - 4.99).abs() < 1e-9);
    }

    #[test]
    fn export_import_continues_identically() {
        let mut rng = Stream::from_seed(0);
        let mut init = Init::new(&mut rng, 0.5);
        let mut a: Param<f64> = init.truncated_normal("w".into(), vec![4]);
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..3 {
            let grads = quad_grads(&[&a], 1.0);
            opt.step([&mut a], &grads);
        }
        let mut b = a.clone();
        let mut resumed = Optimizer::import(opt.export()).unwrap();
        for _ in 0..3 {
            let ga = quad_grads(&[&a], 1.0);
            opt.step([&mut a], &ga);
            let gb = quad_grads(&[&b], 1.0);
            resumed.step([&mut b], &gb);
        }
        assert_eq!(a.value, b.value);
        assert_eq!(opt.steps(), 6);

        let mut bad = opt.export();
        bad.moments[0].1.tensors.pop();
        assert!(Optimizer::import(bad).is_err());
    }
}
