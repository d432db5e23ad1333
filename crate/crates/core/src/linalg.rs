//! Thin wrappers over the LAPACK-backed solvers used across the crate.
//!
//! Everything here is dense and deliberately small: symmetric
//! eigendecomposition in descending order, Cholesky factorization, and
//! triangular/SPD solves. Keeping the backend behind these functions means
//! the rest of the crate never touches solver traits directly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use ndarray_linalg::{Cholesky, Eigh, UPLO};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("symmetric eigendecomposition failed: {0}")]
    Eigen(ndarray_linalg::error::LinalgError),
    #[error("Cholesky factorization failed (matrix not positive definite)")]
    NotPositiveDefinite,
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Returns `(values, vectors)` where column `k` of `vectors` pairs with
/// `values[k]`. The input is read as symmetric from its lower triangle.
pub fn eigh_desc(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), LinalgError> {
    let (vals, vecs) = a.eigh(UPLO::Lower).map_err(LinalgError::Eigen)?;
    let n = vals.len();
    let mut vals_d = Array1::zeros(n);
    let mut vecs_d = Array2::zeros((n, n));
    for k in 0..n {
        vals_d[k] = vals[n - 1 - k];
        vecs_d.column_mut(k).assign(&vecs.column(n - 1 - k));
    }
    Ok((vals_d, vecs_d))
}

/// Lower Cholesky factor `L` with `L L^t = a`.
pub fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    a.cholesky(UPLO::Lower)
        .map_err(|_| LinalgError::NotPositiveDefinite)
}

/// Solves `L y = b` for lower-triangular `L` by forward substitution.
pub fn forward_sub(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[[i, j]] * y[j];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solves `L^t x = b` for lower-triangular `L` by backward substitution.
pub fn backward_sub_t(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in (i + 1)..n {
            s -= l[[j, i]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves the SPD system `a x = b` through a fresh Cholesky factorization.
pub fn spd_solve(a: &Array2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>, LinalgError> {
    let l = cholesky_lower(a)?;
    Ok(chol_solve(l.view(), b))
}

/// Solves `L L^t x = b` given an existing lower Cholesky factor.
pub fn chol_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    backward_sub_t(l, forward_sub(l, b).view())
}

/// Solves the SPD system `a X = B` column by column.
pub fn spd_solve_mat(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let l = cholesky_lower(a)?;
    let mut x = Array2::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        x.column_mut(j).assign(&chol_solve(l.view(), col));
    }
    Ok(x)
}
