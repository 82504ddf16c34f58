use super::decomp::{check_symmetric, cholesky, tri_solve};
use super::matrix::{dot, norm2};
use super::{LinalgError, Matrix};

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// An eigenvalue with its unit-norm eigenvector.
///
/// The vector's largest-magnitude entry is positive (first such entry on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct EigPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Flips `v` in place so its largest-magnitude entry is positive; returns the applied sign.
pub fn fix_sign(v: &mut [f64]) -> f64 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        -1.0
    } else {
        1.0
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Pairs are returned in ascending eigenvalue order with orthonormal,
/// sign-fixed eigenvectors. Converges when the off-diagonal Frobenius norm
/// falls below `1e-12 · ‖A‖_F`; gives up after 100 sweeps.
pub fn sym_eig(a: &Matrix) -> Result<Vec<EigPair>, LinalgError> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut w = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = w.frobenius_norm();

    let mut converged = scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        let off = off_diagonal_norm(&w);
        if off <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                off_diagonal: off,
            });
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (c, s) = rotation(w[(p, p)], w[(q, q)], apq);
                rotate(&mut w, &mut v, p, q, c, s);
            }
        }
    }
    debug_assert!(converged);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[(i, i)].total_cmp(&w[(j, j)]).then(i.cmp(&j)));
    Ok(order
        .into_iter()
        .map(|k| {
            let mut vector = v.column(k);
            fix_sign(&mut vector);
            EigPair {
                value: w[(k, k)],
                vector,
            }
        })
        .collect())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Rotation `(c, s)` that annihilates the `(p, q)` entry of a 2×2 symmetric block.
fn rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau.abs() > 1e150 {
        0.5 / tau
    } else {
        let sign = if tau >= 0.0 { 1.0 } else { -1.0 };
        sign / (tau.abs() + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

/// `A ← Jᵀ A J`, `V ← V J` with `J` the Givens rotation in the `(p, q)` plane.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    {
        let data = a.data_mut();
        for k in 0..n {
            let apk = data[p * n + k];
            let aqk = data[q * n + k];
            data[p * n + k] = c * apk - s * aqk;
            data[q * n + k] = s * apk + c * aqk;
        }
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Everything the top generalized eigenpair computation produces, kept for
/// the reverse pass.
///
/// The problem `S_A w = λ S_N w` is reduced with `S_N = L Lᵀ` to the
/// standard problem `C u = λ u`, `C = L⁻¹ S_A L⁻ᵀ`, and mapped back with
/// `v = L⁻ᵀ u`, `w = ±v / ‖v‖`.
#[derive(Clone, Debug)]
pub struct GenEigDecomp {
    pub(crate) l: Matrix,
    /// `L⁻¹ S_A`
    pub(crate) y: Matrix,
    /// `L⁻¹ Yᵀ` before symmetrisation.
    pub(crate) c_raw: Matrix,
    pub(crate) reduced: Vec<EigPair>,
    /// `L⁻ᵀ u` for the top reduced eigenvector `u`.
    pub(crate) v: Vec<f64>,
    pub(crate) v_norm: f64,
    pub(crate) sign: f64,
    pub(crate) pair: EigPair,
}

impl GenEigDecomp {
    pub fn pair(&self) -> &EigPair {
        &self.pair
    }

    pub fn value(&self) -> f64 {
        self.pair.value
    }

    pub fn vector(&self) -> &[f64] {
        &self.pair.vector
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.l
    }

    /// Eigenpairs of the reduced standard problem, ascending.
    pub fn reduced_pairs(&self) -> &[EigPair] {
        &self.reduced
    }
}

/// Top generalized eigenpair of the symmetric-definite pencil `(S_A, S_N)`.
pub fn gen_eig_max(s_a: &Matrix, s_n: &Matrix) -> Result<EigPair, LinalgError> {
    Ok(gen_eig_max_decomp(s_a, s_n)?.pair)
}

pub fn gen_eig_max_decomp(s_a: &Matrix, s_n: &Matrix) -> Result<GenEigDecomp, LinalgError> {
    check_symmetric(s_a)?;
    if s_a.shape() != s_n.shape() {
        return Err(LinalgError::ShapeMismatch {
            op: "gen_eig_max",
            left: s_a.shape(),
            right: s_n.shape(),
        });
    }
    let l = cholesky(s_n)?;
    let y = tri_solve(&l, s_a, false)?;
    let c_raw = tri_solve(&l, &y.transpose(), false)?;
    let reduced = sym_eig(&c_raw.symmetrized())?;
    let top = reduced.last().ok_or(LinalgError::Empty)?;
    let v = tri_solve(&l, &Matrix::column_vector(&top.vector), true)?.into_vec();
    let v_norm = norm2(&v);
    let mut w: Vec<f64> = v.iter().map(|x| x / v_norm).collect();
    let sign = fix_sign(&mut w);
    let pair = EigPair {
        value: top.value,
        vector: w,
    };
    Ok(GenEigDecomp {
        l,
        y,
        c_raw,
        reduced,
        v,
        v_norm,
        sign,
        pair,
    })
}

/// `wᵀ S_A w / wᵀ S_N w`
pub fn rayleigh_quotient(s_a: &Matrix, s_n: &Matrix, w: &[f64]) -> f64 {
    quad_form(s_a, w) / quad_form(s_n, w)
}

pub fn quad_form(a: &Matrix, w: &[f64]) -> f64 {
    (0..a.rows()).map(|i| w[i] * dot(a.row(i), w)).sum()
}
