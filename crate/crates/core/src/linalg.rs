//! Small dense linear-algebra helpers shared by the posterior updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let max_diag = m.diagonal().amax();
    // nalgebra accepts a zero pivot, which leaves a singular factor behind
    let factor = m
        .clone()
        .cholesky()
        .filter(|ch| ch.l_dirty().diagonal().iter().all(|d| d * d > 1e-13 * max_diag));
    match factor {
        Some(ch) => {
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            Ok(inv)
        }
        None => Err(Error::Numerical {
            message: format!("{what} is not positive definite"),
            min_eigenvalue: min_eigenvalue(m),
        }),
    }
}

/// Row-major flattening used by the persisted posterior columns.
pub fn flatten_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unflatten_row_major(values: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if values.len() != n * n {
        return Err(Error::rejected(format!(
            "expected {} values for a {n}x{n} matrix, got {}",
            n * n,
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(n, n, values))
}

pub fn quad_form(s: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (s.transpose() * m * s)[(0, 0)]
}
