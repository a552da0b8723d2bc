//! Central finite-difference gradient checking in 64-bit mode.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a 1e-6 floor so exact-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare `d f / d inputs` from the tape with `(f(x+h) − f(x−h)) / 2h`.
///
/// `f` builds a scalar from the input vars; it is re-run from scratch for every
/// perturbed element, so the numeric side only ever evaluates forward passes.
pub fn check_gradients<Fun>(inputs: &[Tensor<f64>], h: f64, f: Fun) -> Result<GradCheck>
where
    Fun: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().map_or_else(|| Tensor::zeros(t.shape()), Ok))
            .collect::<Result<_>>()?
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?.value();
        if out.numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(out.item())
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = ti;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
