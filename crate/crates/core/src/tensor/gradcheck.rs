use super::{Graph, Real, Tensor, Var};
use crate::error::{invalid, Result};

/// A scalar-valued function built from graph ops, evaluable at any precision.
pub trait ScalarFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`; infinite on failure.
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// False when any evaluation produced NaN or infinity.
    pub finite: bool,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.finite && self.max_rel_err <= tol
    }
}

fn eval<T: Real, F: ScalarFn>(f: &F, x: Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let v = g.leaf(x);
    let out = f.build(&mut g, v)?;
    if !g.value(out).is_scalar() {
        return invalid("gradient check needs a scalar-valued function");
    }
    Ok(g.value(out).item())
}

/// Checks the `f32` reverse-mode gradient of `f` at `x` against central
/// differences evaluated in `f64`, so round-off in the oracle stays far below
/// the tolerances being tested.
pub fn finite_diff_check<F: ScalarFn>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<GradCheck> {
    if !(1e-5..=1e-2).contains(&eps) {
        return invalid(format!("eps {eps} outside [1e-5, 1e-2]"));
    }
    let mut g = Graph::<f32>::new();
    let v = g.param(x.clone());
    let out = f.build(&mut g, v)?;
    if !g.value(out).is_scalar() {
        return invalid("gradient check needs a scalar-valued function");
    }
    let mut finite = g.value(out).all_finite();
    g.backward(out)?;
    let analytic: Vec<f64> = g
        .grad(v)
        .expect("param leaf has a gradient")
        .iter()
        .map(|&d| d as f64)
        .collect();

    let base: Tensor<f64> = x.cast();
    let mut numeric = Vec::with_capacity(base.numel());
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        let d = (eval(f, plus)? - eval(f, minus)?) / (2.0 * eps);
        finite &= d.is_finite();
        numeric.push(d);
    }
    finite &= analytic.iter().all(|a| a.is_finite());

    let max_rel_err = if finite {
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric,
        finite,
    })
}
