//! Central-difference gradient oracle.
//!
//! The analytic side runs at the training precision (`f32` by default); the
//! numeric side re-evaluates the same objective in `f64`, so rounding noise in
//! the difference quotient does not swamp small gradient components.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{config_err, dim_err, Error, Result};

/// A scalar-valued function of one tensor, expressible at any precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, graph: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Max over coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
/// with the analytic gradient computed at `f32`.
pub fn gradient_check<F: Objective>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<f64> {
    gradient_check_with::<f32, F>(f, x, eps)
}

/// [`gradient_check`] with the analytic gradient computed at precision `A`.
pub fn gradient_check_with<A: Scalar, F: Objective>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(config_err!("gradient_check eps must lie in [1e-5, 1e-2], got {eps}"));
    }
    let mut graph = Graph::<A>::new();
    let xv = graph.param(x.cast::<A>());
    let out = f.eval(&mut graph, xv)?;
    let value = graph.value(out);
    if value.numel() != 1 {
        return Err(dim_err!("objective must be scalar, got {:?}", value.shape()));
    }
    if !value.item().is_finite() {
        return Err(Error::Numeric("objective is not finite at x".into()));
    }
    graph.backward(out)?;
    let analytic: Vec<f64> = match graph.grad(xv) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let base = x.cast::<f64>();
    let eval_at = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let v = g.input(probe);
        let out = f.eval(&mut g, v)?;
        let y = g.value(out).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Numeric("objective is not finite near x".into()))
        }
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
