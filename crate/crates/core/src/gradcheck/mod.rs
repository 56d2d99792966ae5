//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

pub mod suite;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Stencil widths, relative to `epsilon`, tried when the first one disagrees.
pub const RETRY_FACTORS: [f64; 3] = [0.1, 0.01, 10.0];

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many (seeded, randomly chosen) elements per input.
    pub max_checks_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, tolerance: DEFAULT_TOLERANCE, max_checks_per_input: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements that needed a second stencil width.
    pub retried: usize,
    pub pass: bool,
    /// `(input index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: Option<(f64, f64)>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of(graph: &Graph<f64>, out: Var, projection: &Option<Tensor<f64>>) -> Result<f64> {
    let v = graph.value(out);
    let s = match projection {
        None => v.data()[0],
        Some(w) => v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
    };
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {s}")));
    }
    Ok(s)
}

/// Compares the tape's gradients of `f` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input.
///
/// Every input is bound as a trainable leaf. A non-scalar output is reduced
/// with a fixed seeded random projection. Elements that fail at `epsilon`
/// are re-measured with the widths in [`RETRY_FACTORS`] before counting.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions { epsilon, tolerance, ..Default::default() };
    finite_diff_check_with(f, inputs, &opts)
}

pub fn finite_diff_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut graph, vars, out) = run(inputs)?;
    for t in inputs {
        if !t.all_finite() {
            return Err(Error::NonFinite("gradient-check input".into()));
        }
    }
    let projection = if graph.value(out).len() == 1 {
        None
    } else {
        let shape = graph.value(out).shape().to_vec();
        Some(Rng::new(0x5EED_0F_C4EC).uniform_tensor::<f64>(&shape, -1.0, 1.0))
    };
    let objective = match &projection {
        None => out,
        Some(w) => graph.weighted_sum(out, w.clone())?,
    };
    let grads = graph.backward(objective)?;

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, retried: 0, pass: true, worst: None, worst_values: None };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(inputs[k].shape().to_vec());
                &zeros
            }
        };
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of input {k}")));
        }
        let len = inputs[k].len();
        let mut indices: Vec<usize> = (0..len).collect();
        if let Some(limit) = opts.max_checks_per_input {
            if limit < len {
                rng.shuffle(&mut indices);
                indices.truncate(limit);
                indices.sort_unstable();
            }
        }
        for &i in &indices {
            let orig = inputs[k].data()[i];
            let mut central = |eps: f64| -> Result<f64> {
                perturbed[k].data_mut()[i] = orig + eps;
                let (g_plus, _, o_plus) = run(&perturbed)?;
                let f_plus = scalar_of(&g_plus, o_plus, &projection)?;
                perturbed[k].data_mut()[i] = orig - eps;
                let (g_minus, _, o_minus) = run(&perturbed)?;
                let f_minus = scalar_of(&g_minus, o_minus, &projection)?;
                perturbed[k].data_mut()[i] = orig;
                Ok((f_plus - f_minus) / (2.0 * eps))
            };

            let a = analytic.data()[i];
            let mut numeric = central(opts.epsilon)?;
            let mut err = relative_error(a, numeric);
            // A stencil that straddles a ReLU or max switch measures the
            // average of two slopes; a rounding-dominated one measures noise.
            // Retry once narrower and once wider. A wrong gradient disagrees
            // at every width.
            if err > opts.tolerance {
                for factor in RETRY_FACTORS {
                    let n = central(opts.epsilon * factor)?;
                    let e = relative_error(a, n);
                    if e < err {
                        err = e;
                        numeric = n;
                    }
                    if err <= opts.tolerance {
                        break;
                    }
                }
                report.retried += 1;
            }
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((k, i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    report.pass = report.max_rel_err <= opts.tolerance;
    Ok(report)
}
