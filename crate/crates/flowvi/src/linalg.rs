//! Small dense linear-algebra helpers: triangular solves for the
//! full-rank-to-autoregressive construction and an LU log|det| used by the
//! numeric Jacobian checks. Dimensions here are tiny (D ≤ a few hundred), so
//! plain O(n²)/O(n³) loops are fine.

use crate::error::{Error, Result};

/// Solve `L·x = b` for lower-triangular `L` given as rows of length `i+1`.
pub fn solve_lower(l_rows: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = &l_rows[i];
        let mut acc = b[i];
        for j in 0..i {
            acc -= row[j] * x[j];
        }
        let diag = row[i];
        if diag == 0.0 {
            return Err(Error::Usage(format!("singular triangular matrix at row {i}")));
        }
        x[i] = acc / diag;
    }
    Ok(x)
}

/// log |det A| of a square row-major matrix via LU with partial pivoting.
pub fn log_abs_det(a: &[Vec<f64>]) -> Result<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut logdet = 0.0;
    for k in 0..n {
        let (mut pivot_row, mut pivot_val) = (k, m[k][k].abs());
        for r in (k + 1)..n {
            if m[r][k].abs() > pivot_val {
                pivot_row = r;
                pivot_val = m[r][k].abs();
            }
        }
        if pivot_val == 0.0 {
            return Err(Error::Usage("matrix is singular".into()));
        }
        m.swap(k, pivot_row);
        logdet += m[k][k].abs().ln();
        for r in (k + 1)..n {
            let f = m[r][k] / m[k][k];
            for c in k..n {
                m[r][c] -= f * m[k][c];
            }
        }
    }
    Ok(logdet)
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9). Used for Gamma and Binomial
/// normalizing constants, which only need build-time accuracy.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// log C(n, k) via ln Γ.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tri_solve_2x2() {
        let l = vec![vec![1.0], vec![0.5, 2.0]];
        let x = solve_lower(&l, &[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn logdet_of_known_matrix() {
        // det = 2·3 - 1·1 = 5
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        assert!((log_abs_det(&a).unwrap() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_reference_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(0.5) - 0.5723649429247001).abs() < 1e-10); // ln √π
        assert!((ln_gamma(10.0) - 12.801827480081469).abs() < 1e-9); // ln 9!
        assert!((ln_gamma(0.01) - 4.599479878042022).abs() < 1e-8);
    }

    #[test]
    fn ln_choose_small() {
        assert!((ln_choose(5, 2) - 10.0f64.ln()).abs() < 1e-10);
    }
}
