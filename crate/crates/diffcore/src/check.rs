//! Finite-difference gradient verification.
//!
//! The analytic gradient from [`Graph::backward`] is compared against central
//! differences of the same scalar function. Run it at `f64` — at `f32` the
//! difference quotient itself drowns in rounding noise.

use crate::error::DiffError;
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_err: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Check d`f`/d`x` at the point `x`.
///
/// `f` must rebuild the same scalar function on any graph it is given; it is
/// called once for the analytic pass and `2·len(x)` times for the central
/// differences.
pub fn grad_check<R, F>(f: F, x: &Tensor<R>, eps: f64) -> Result<GradCheck, DiffError>
where
    R: Real,
    F: Fn(&mut Graph<R>, NodeId) -> NodeId,
{
    let mut g: Graph<R> = Graph::new();
    let xn = g.leaf_grad(x.clone());
    let root = f(&mut g, xn);
    g.backward(root)?;
    let analytic: Vec<f64> = if g.grad(xn).is_empty() {
        vec![0.0; x.len()]
    } else {
        g.grad(xn).iter().map(|&v| v.to_f64()).collect()
    };

    let eval = |pt: &Tensor<R>| -> R {
        let mut g: Graph<R> = Graph::new();
        let xn = g.input(pt.clone());
        let root = f(&mut g, xn);
        g.value(root).item()
    };

    let mut numeric = vec![0.0; x.len()];
    let mut pt = x.clone();
    for i in 0..x.len() {
        let orig = pt.data()[i];
        pt.data_mut()[i] = orig + R::from_f64(eps);
        let plus = eval(&pt).to_f64();
        pt.data_mut()[i] = orig - R::from_f64(eps);
        let minus = eval(&pt).to_f64();
        pt.data_mut()[i] = orig;
        numeric[i] = (plus - minus) / (2.0 * eps);
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let denom = numeric[i].abs().max(1.0);
        let rel = (analytic[i] - numeric[i]).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck { max_rel_err, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -0.7, 1.2]);
        let res = grad_check(
            |g, xn| {
                let y = g.mul(xn, xn);
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(res.max_rel_err < 1e-8, "rel err {}", res.max_rel_err);
    }

    #[test]
    fn tanh_passes_tightly() {
        let x = Tensor::<f64>::from_vec(vec![0.1, 0.5, -0.9]);
        let res = grad_check(
            |g, xn| {
                let y = g.tanh(xn);
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(res.max_rel_err < 1e-9);
    }
}
