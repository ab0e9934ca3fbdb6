//! Central finite differences — the independent oracle that reverse-mode
//! gradients and flow log-determinants are checked against.

use crate::error::{Error, Result};

/// Central-difference gradient of a deterministic scalar function.
///
/// `f` is re-evaluated at `params ± step` per coordinate. The builder is
/// evaluated twice at the base point first; disagreement means it is not
/// deterministic and the oracle result would be meaningless.
pub fn finite_diff<F>(f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::Usage(format!("finite_diff step must be positive, got {step}")));
    }
    let base1 = f(params);
    let base2 = f(params);
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "builder is not deterministic: {base1} vs {base2} at the same point"
        )));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work);
        work[i] = orig - step;
        let minus = f(&work);
        work[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector-valued map, row-major
/// `jac[i][j] = ∂out_i/∂in_j`.
pub fn jacobian<F>(f: F, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if step <= 0.0 {
        return Err(Error::Usage("jacobian step must be positive".into()));
    }
    let base = f(x);
    let n_out = base.len();
    let mut work = x.to_vec();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    for j in 0..x.len() {
        let orig = work[j];
        work[j] = orig + step;
        let plus = f(&work);
        work[j] = orig - step;
        let minus = f(&work);
        work[j] = orig;
        for i in 0..n_out {
            jac[i][j] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}
