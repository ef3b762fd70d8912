use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per checked coordinate, in coordinate order.
    pub errors: Vec<(usize, f64)>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so that coordinates whose
/// true derivative is ~0 are judged on absolute error.
const REL_FLOOR: f64 = 1e-3;

/// Checks `f` at `x` coordinate by coordinate.
///
/// `f` rebuilds its graph from scratch for every evaluation and must be
/// deterministic (eval mode). `max_coords` limits the check to an evenly
/// strided subset of coordinates for large inputs. Any error type that
/// tensor errors convert into may be used by `f`.
pub fn grad_check<F, E>(
    f: F,
    x: &Tensor<f64>,
    step: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |t: Tensor<f64>| -> Result<f64, E> {
        let mut g = Graph::eval();
        let v = g.param(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::eval();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let analytic: Vec<f64> = if g.is_tracked(out) {
        let grads = g.backward(out)?;
        grads
            .get(xv)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        // f ignores its input entirely
        vec![0.0; x.numel()]
    };

    let n = x.numel();
    let stride = match max_coords {
        Some(m) if m > 0 && m < n => n.div_ceil(m),
        _ => 1,
    };
    let mut errors = Vec::new();
    for i in (0..n).step_by(stride) {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite { coord: i }.into());
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        errors.push((i, err));
    }
    let max_error = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        errors,
        max_error,
        tol,
        passed: max_error <= tol,
    })
}
