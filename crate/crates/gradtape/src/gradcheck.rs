//! Central finite-difference verification of analytic gradients.

use crate::tensor::Tensor;
use crate::var::{grad, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckTolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self { step: 1e-6, rtol: 1e-3, atol: 1e-4 }
    }
}

/// Worst entry found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `d f / d inputs` from the engine against central differences.
///
/// `f` must build a scalar from the given leaves. Every element of every
/// input is perturbed unless `max_per_input` limits it, in which case an
/// evenly strided subset is used.
pub fn check_gradients(
    f: &dyn Fn(&[Var<f64>]) -> Var<f64>,
    inputs: &[(String, Tensor<f64>)],
    tol: GradCheckTolerance,
    max_per_input: Option<usize>,
) -> GradCheckReport {
    let leaves: Vec<Var<f64>> = inputs.iter().map(|(_, t)| Var::leaf(t.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.value().len(), 1, "gradient check needs a scalar objective");
    let analytic = grad(&out, &leaves, false);

    let eval = |which: usize, at: usize, delta: f64| -> f64 {
        let vars: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                if i == which {
                    let mut t = t.clone();
                    t.data_mut()[at] += delta;
                    Var::leaf(t)
                } else {
                    Var::leaf(t.clone())
                }
            })
            .collect();
        f(&vars).item()
    };

    let mut report = GradCheckReport { checked: 0, failures: Vec::new(), max_abs_err: 0.0 };
    for (i, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = match max_per_input {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for at in (0..n).step_by(stride) {
            let numeric = (eval(i, at, tol.step) - eval(i, at, -tol.step)) / (2.0 * tol.step);
            let exact = analytic[i].value().data()[at];
            let err = (numeric - exact).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            if !(err <= tol.atol || err <= tol.rtol * numeric.abs().max(exact.abs())) {
                report.failures.push(format!("{name}[{at}]: analytic {exact:.8e} vs numeric {numeric:.8e}"));
            }
        }
    }
    report
}
