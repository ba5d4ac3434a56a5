//! Central-difference verification of reverse-mode gradients (64-bit).

use alloc::format;
use alloc::vec::Vec;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (into the checked coordinates) of the worst disagreement.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Per-coordinate relative error. The denominator is floored at 1e-3 of the
/// largest gradient magnitude, so coordinates whose true derivative is ~0 are
/// judged against the overall scale instead of against rounding noise.
fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel_error = 0.0;
    let mut worst = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let den = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / den;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst = i;
        }
    }
    GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what} during gradient check")))
    }
}

/// Checks the gradient of a scalar function of one input tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    finite(g.scalar(y), "function value")?;
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.wrt(x) {
        Some(d) => d.to_vec(),
        None => alloc::vec![0.0; point.numel()],
    };
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let y = f(&mut g, x)?;
        finite(g.scalar(y), "function value")
    };
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        numeric.push(finite((eval(plus)? - eval(minus)?) / (2.0 * eps), "difference")?);
    }
    for a in &analytic {
        finite(*a, "analytic gradient")?;
    }
    Ok(compare(analytic, numeric))
}

/// Checks the gradient of a scalar function with respect to model parameters.
///
/// At most `max_coords` evenly spaced coordinates per parameter are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic_all = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        finite(g.scalar(y), "function value")?;
        g.backward(y)?.for_params(store)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            let mut eval = |delta: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = orig + delta;
                let mut g = Graph::with_params(&work);
                let y = f(&mut g)?;
                finite(g.scalar(y), "function value")
            };
            let up = eval(eps)?;
            let down = eval(-eps)?;
            work.value_mut(id).data_mut()[i] = orig;
            numeric.push(finite((up - down) / (2.0 * eps), "difference")?);
            let a = analytic_all[id.index()].as_ref().map_or(0.0, |g| g[i]);
            analytic.push(finite(a, "analytic gradient")?);
        }
    }
    Ok(compare(analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new(&[1], alloc::vec![3.0]).unwrap();
        let r = grad_check(|g, x| g.mul(x, x).map(|y| g.sum(y)), &p, DEFAULT_EPS).unwrap();
        assert!((r.analytic[0] - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn discontinuity_is_reported() {
        // relu(x) + step(x) has a jump at 0 that the tape cannot see.
        let p = Tensor::new(&[1], alloc::vec![0.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let r = g.relu(x);
                let v = g.value(x)[0];
                let step = g.input(Tensor::scalar(if v > 0.0 { 1.0 } else { 0.0 }));
                let y = g.add(r, step)?;
                Ok(g.sum(y))
            },
            &p,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.5, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_is_an_error() {
        let p = Tensor::new(&[1], alloc::vec![1.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &p, DEFAULT_EPS);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
