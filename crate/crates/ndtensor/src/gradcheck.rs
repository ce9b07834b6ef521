//! Central-difference gradient verification in double precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of `f` at `input` against central
/// differences. Returns `max_k |analytic_k - numeric_k| / max(1, |analytic_k|)`.
///
/// `f` builds a scalar from the input node; it must be deterministic.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let root = f(&mut g, x)?;
    g.backward(root)?;
    let analytic = g.grad(x).expect("input requires grad").to_vec();

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let root = f(&mut g, x)?;
        Ok(g.value(root).data()[0])
    };

    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[k] += eps;
        let mut minus = input.clone();
        minus.data_mut()[k] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Central difference of a scalar function of a flat parameter vector at
/// coordinate `k`.
pub fn central_difference<F>(mut f: F, x: &[f64], k: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    probe[k] = x[k] + eps;
    let up = f(&probe)?;
    probe[k] = x[k] - eps;
    let down = f(&probe)?;
    Ok((up - down) / (2.0 * eps))
}
