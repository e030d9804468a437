//! Dense linear algebra helpers shared by the closed-form trainer and the
//! geometry code: a Cholesky factorization that reports which pivot failed,
//! triangular solves against many right-hand sides, modified Gram-Schmidt
//! orthonormalization for kernel initialization, and a closed-form symmetric
//! 2x2 eigendecomposition for error ellipses.
//!
//! Everything here operates on `ndarray` types directly so the large Gram
//! matrices produced by the trainer never get copied into another layout.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with the offending pivot index and value when the matrix is not
/// positive definite, which for regularized normal equations usually means
/// the ridge term `1/C` is too small for the conditioning at hand.
pub fn cholesky_lower(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let djj = diag.sqrt();
        l[(j, j)] = djj;
        // Column update below the pivot. Rows are contiguous, so the inner
        // products run over slices.
        for i in j + 1..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L L^T x = b` for each column of `b` given the lower factor.
pub fn cholesky_solve(l: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "rhs has {} rows, factor is {}x{}",
            b.nrows(),
            n,
            n
        )));
    }
    let mut x = b.to_owned();
    // Forward substitution: L y = b.
    for i in 0..n {
        let (head, mut tail) = x.view_mut().split_at(Axis(0), i);
        let mut row = tail.row_mut(0);
        for k in 0..i {
            let lik = l[(i, k)];
            if lik != 0.0 {
                row.scaled_add(-lik, &head.row(k));
            }
        }
        row.mapv_inplace(|v| v / l[(i, i)]);
    }
    // Back substitution: L^T x = y.
    for i in (0..n).rev() {
        let (mut head, tail) = x.view_mut().split_at(Axis(0), i + 1);
        let mut row = head.row_mut(i);
        for k in i + 1..n {
            let lki = l[(k, i)];
            if lki != 0.0 {
                row.scaled_add(-lki, &tail.row(k - i - 1));
            }
        }
        row.mapv_inplace(|v| v / l[(i, i)]);
    }
    Ok(x)
}

/// Factor-and-solve convenience for `A x = b` with `A` symmetric positive
/// definite.
pub fn solve_spd(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let l = cholesky_lower(a)?;
    cholesky_solve(l.view(), b)
}

/// Orthonormalizes the columns of `m` in place by modified Gram-Schmidt with
/// one re-orthogonalization pass. Requires `ncols <= nrows`; a rank-deficient
/// input surfaces as a non-finite column after normalization.
pub fn mgs_orthonormalize(m: &mut Array2<f64>) -> Result<()> {
    let (rows, cols) = m.dim();
    if cols > rows {
        return Err(Error::ShapeMismatch(format!(
            "cannot orthonormalize {cols} columns in {rows} dimensions"
        )));
    }
    for j in 0..cols {
        for _ in 0..2 {
            for k in 0..j {
                let proj = m.column(k).dot(&m.column(j));
                let qk = m.column(k).to_owned();
                m.column_mut(j).scaled_add(-proj, &qk);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if norm <= f64::EPSILON * rows as f64 {
            return Err(Error::InvalidInput(format!(
                "column {j} is numerically dependent on earlier columns"
            )));
        }
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Eigendecomposition of the symmetric matrix `[[a, b], [b, c]]`.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors
/// as columns. Used for the 2-sigma error ellipses in the report output.
pub fn sym2x2_eigen(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let tr = a + c;
    let diff = a - c;
    let disc = (diff * diff + 4.0 * b * b).sqrt();
    let l1 = 0.5 * (tr + disc);
    let l2 = 0.5 * (tr - disc);
    // Eigenvector for l1: (b, l1 - a) or (l1 - c, b), pick the better
    // conditioned form.
    let v1 = if b.abs() > 1e-300 {
        [b, l1 - a]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let n1 = (v1[0] * v1[0] + v1[1] * v1[1]).sqrt();
    let v1 = [v1[0] / n1, v1[1] / n1];
    // Second eigenvector is the perpendicular.
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [v1, v2])
}
