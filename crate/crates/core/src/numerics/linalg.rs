//! Ensemble statistics and the symmetric positive-definite solve.

use super::Matrix;
use crate::error::{Error, Result};

/// Relative diagonal jitter added per retry when Cholesky fails.
pub const JITTER_RELATIVE: f64 = 1e-10;
pub const MAX_JITTER_ATTEMPTS: usize = 3;

/// Column anomalies `S' = [s(1) - s̄, ..., s(N) - s̄]`.
pub fn ensemble_anomalies(s: &Matrix) -> Result<Matrix> {
    let n = s.cols();
    if n < 2 {
        return Err(Error::DegenerateEnsemble(n));
    }
    let mean = s.column_mean();
    let mut out = s.clone();
    for i in 0..s.rows() {
        for j in 0..n {
            out[(i, j)] -= mean[i];
        }
    }
    Ok(out)
}

/// Sample covariance `S' S'^T / (N - 1)`.
pub fn covariance(s: &Matrix) -> Result<Matrix> {
    let a = ensemble_anomalies(s)?;
    let d = a.rows();
    let denom = (a.cols() - 1) as f64;
    let mut c = Matrix::zeros(d, d);
    for i in 0..d {
        let ri = a.row(i);
        for j in 0..=i {
            let rj = a.row(j);
            let v = ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>() / denom;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Square-root-free Cholesky `A = L D Lᵀ` with unit-diagonal `L`; `D` is
/// stored on the diagonal. `None` if a pivot is not strictly positive.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let m = a.rows();
    let mut l = Matrix::zeros(m, m);
    for j in 0..m {
        let mut dj = a[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * l[(k, k)];
        }
        if !dj.is_finite() || dj <= 0.0 {
            return None;
        }
        l[(j, j)] = dj;
        for i in j + 1..m {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * l[(k, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Some(l)
}

fn cholesky_solve(ld: &Matrix, b: &Matrix) -> Matrix {
    let m = ld.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..m {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= ld[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v;
        }
        for i in 0..m {
            x[(i, c)] /= ld[(i, i)];
        }
        for i in (0..m).rev() {
            let mut v = x[(i, c)];
            for k in i + 1..m {
                v -= ld[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = v;
        }
    }
    x
}

/// Solves `A X = B` for symmetric positive-definite `A`.
///
/// When the factorization fails, `1e-10 · trace(A)/m` is added to the
/// diagonal and the factorization retried, up to three times. A zero trace
/// uses a unit scale so that an all-zero `A` still resolves.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let m = a.rows();
    if a.cols() != m || b.rows() != m {
        return Err(Error::contract(format!(
            "spd_solve: A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if let Some(l) = cholesky(a) {
        return Ok(cholesky_solve(&l, b));
    }
    let mean_diag = a.trace() / m as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let jitter = JITTER_RELATIVE * scale;
    let mut shifted = a.clone();
    for _ in 0..MAX_JITTER_ATTEMPTS {
        for i in 0..m {
            shifted[(i, i)] += jitter;
        }
        if let Some(l) = cholesky(&shifted) {
            return Ok(cholesky_solve(&l, b));
        }
    }
    Err(Error::SingularInnovationCovariance {
        attempts: MAX_JITTER_ATTEMPTS,
    })
}
