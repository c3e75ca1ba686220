use super::{DiffError, Graph, Tensor, Var};

/// Gradients whose magnitude falls below this are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

/// Central-difference comparison of `analytic` against `value` around `x`.
///
/// Relative error per element is `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn compare_gradients(
    value: impl Fn(&Tensor<f64>) -> Result<f64, DiffError>,
    analytic: &[f64],
    x: &Tensor<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, DiffError> {
    if step <= 0.0 {
        return Err(DiffError::Contract(format!("step must be > 0, got {step}")));
    }
    if analytic.len() != x.numel() {
        return Err(DiffError::Shape {
            op: "grad_check",
            lhs: x.shape().to_vec(),
            rhs: vec![analytic.len()],
        });
    }
    let mut probe = x.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    })
}

/// Checks the recorded gradient of a scalar graph function of `x`.
///
/// `f` receives a fresh 64-bit graph and the leaf for `x`, and returns the
/// scalar output node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let value = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.item(out))
    };
    compare_gradients(value, &analytic, x, step, tol)
}
