use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared in absolute terms; the
/// relative error of a component is `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Outcome of comparing backward() gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` per input element.
    pub per_element: Vec<(f64, f64)>,
}

impl GradReport {
    pub fn worst_element(&self) -> Option<usize> {
        self.per_element
            .iter()
            .map(|&(a, n)| rel_err(a, n))
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

fn eval(f: &impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    let value = g.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("f evaluated to {y}")));
    }
    Ok(y)
}

/// Checks the gradient of the scalar function `f` at `x` with central
/// differences of step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut base = x.clone();
    base.zero_grad();

    let mut g = Graph::new();
    let v = g.param(base.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("f(x) is not finite".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; base.numel()]);

    let mut per_element = Vec::with_capacity(base.numel());
    let (mut max_abs_err, mut max_rel_err) = (0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * eps);
        max_abs_err = max_abs_err.max((a - numeric).abs());
        max_rel_err = max_rel_err.max(rel_err(a, numeric));
        per_element.push((a, numeric));
    }
    Ok(GradReport {
        max_abs_err,
        max_rel_err,
        per_element,
    })
}
