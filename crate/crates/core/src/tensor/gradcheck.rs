use std::collections::BTreeMap;

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares backward gradients of a scalar function against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, element by element.
///
/// `f` receives a fresh tape and one differentiable leaf per entry of
/// `params`, in order. `max_per_param` bounds how many elements of each
/// parameter are probed (evenly spaced); `None` probes all of them.
pub fn finite_diff_check<G>(
    params: &[(String, Tensor<f64>)],
    f: G,
    eps: f64,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradientCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zero(v)).collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut per = BTreeMap::new();
    let mut worst = 0.0f64;
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let step = match max_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut param_worst = 0.0f64;
        for e in (0..n).step_by(step) {
            let orig = tensor.data()[e];
            work[pi].1.data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[pi].1.data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[pi].1.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[pi].data()[e], numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            param_worst = param_worst.max(err);
        }
        worst = worst.max(param_worst);
        per.insert(name.clone(), param_worst);
    }
    Ok(GradientCheckReport {
        max_relative_error: worst,
        per_parameter_errors: per,
        tolerance,
        passed: worst <= tolerance,
    })
}
