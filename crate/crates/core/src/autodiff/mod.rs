//! Minimal reverse-mode differentiation over [`Tensor`](crate::Tensor)s.

pub(crate) mod conv;
mod graph;

pub use graph::{Grads, Graph, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar map against central
/// differences and returns the worst
/// `|analytic − numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` receives a fresh graph and the leaf holding the probe point and
/// must return a scalar node.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        let v = g.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value {v} at probe point")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    if !g.value(y).item()?.is_finite() {
        return Err(Error::Numeric("non-finite value at base point".into()));
    }
    let grads = g.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
