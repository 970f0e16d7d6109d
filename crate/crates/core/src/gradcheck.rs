//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by [`check_inputs`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `f` with respect to each
/// input against central differences with step `h`.
///
/// `f` receives the inputs as graph variables and must return a scalar.
/// At most `max_per_input` evenly spread coordinates of each input are
/// probed.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_per_input: usize) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.var(vars[which]).expect("input gradient");
        let n = input.numel();
        let stride = (n / max_per_input.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(max_per_input) {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[which].data_mut()[idx] += h;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[which].data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = rel_err(a, numeric, 1e-6);
            report.checked += 1;
            if err > report.max_rel_err {
                report = GradCheck {
                    max_rel_err: err,
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    report
}
