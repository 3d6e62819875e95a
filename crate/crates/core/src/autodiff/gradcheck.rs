use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the analytic gradient of a scalar function against central
/// differences, coordinate by coordinate.
///
/// `build` receives a fresh graph and the input leaf and must return a scalar.
/// The error per coordinate is `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(build: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::invalid(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = build(&mut g, x)?;
    let analytic = g.backward(y)?.take(x).expect("input leaf requires grad");

    let eval = |p: Tensor, coord: usize| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false);
        let y = build(&mut g, x).map_err(|e| {
            Error::non_finite(format!("evaluation perturbed at coordinate {coord}: {e}"))
        })?;
        let v = g.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::non_finite(format!("evaluation perturbed at coordinate {coord}")));
        }
        Ok(v)
    };

    let mut numeric = Tensor::zeros(point.shape());
    let mut worst = (0.0f64, 0usize);
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let d = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        numeric.data_mut()[i] = d;
        let a = analytic.data()[i];
        let rel = (a - d).abs() / (a.abs() + 1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        analytic,
        numeric,
    })
}
