//! Central finite-difference verification of backward rules.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check, including where the worst disagreement was.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks the gradient of a scalar function of several tensors against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in [1e-7, 1e-4], got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite gradient at input {k}, coordinate {i}"
                )));
            }
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (k, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form: the maximum relative error between backward-mode and
/// central-difference gradients of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_relative_error)
}
