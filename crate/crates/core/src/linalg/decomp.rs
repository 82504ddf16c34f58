use super::{LinalgError, Matrix};

const SYMMETRY_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-12;
const SINGULAR_TOL: f64 = 1e-14;

pub(crate) fn check_symmetric(a: &Matrix) -> Result<(), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

/// Cholesky factor `L` (lower triangular, positive diagonal) with `L·Lᵀ = A`.
///
/// Fails with [`LinalgError::NotPositiveDefinite`] when a pivot drops to
/// `1e-12 · max diag(A)` or below.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    check_symmetric(a)?;
    let n = a.rows();
    let max_diag = a.diagonal().into_iter().fold(0.0f64, f64::max);
    let floor = PIVOT_TOL * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor && pivot > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            // Read the lower triangle only.
            let mut s = a[(i, j)];
            let (ri, rj) = (i * n, j * n);
            let ld = l.data();
            for k in 0..j {
                s -= ld[ri + k] * ld[rj + k];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L·X = B`, or `Lᵀ·X = B` when `transposed`, for lower-triangular `L`.
pub fn tri_solve(l: &Matrix, b: &Matrix, transposed: bool) -> Result<Matrix, LinalgError> {
    if !l.is_square() {
        return Err(LinalgError::NotSquare {
            rows: l.rows(),
            cols: l.cols(),
        });
    }
    let n = l.rows();
    if b.rows() != n {
        return Err(LinalgError::ShapeMismatch {
            op: "tri_solve",
            left: l.shape(),
            right: b.shape(),
        });
    }
    let max_diag = l.diagonal().into_iter().fold(0.0f64, |m, d| m.max(d.abs()));
    for i in 0..n {
        if l[(i, i)].abs() < SINGULAR_TOL * max_diag || l[(i, i)] == 0.0 {
            return Err(LinalgError::SingularTriangular { index: i });
        }
    }
    let k = b.cols();
    let mut x = b.clone();
    if !transposed {
        for i in 0..n {
            for j in 0..i {
                let lij = l[(i, j)];
                if lij == 0.0 {
                    continue;
                }
                for c in 0..k {
                    let v = x[(j, c)];
                    x[(i, c)] -= lij * v;
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                // (Lᵀ)_{ij} = L_{ji}
                let lji = l[(j, i)];
                if lji == 0.0 {
                    continue;
                }
                for c in 0..k {
                    let v = x[(j, c)];
                    x[(i, c)] -= lji * v;
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
        }
    }
    Ok(x)
}

/// Solves `A·X = B` for symmetric positive-definite `A` through its Cholesky factor.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    let l = cholesky(a)?;
    let y = tri_solve(&l, b, false)?;
    tri_solve(&l, &y, true)
}
