//! Reverse-mode rules (vector-Jacobian products) for the kernels in this module.
//!
//! Adjoints with respect to symmetric inputs are returned symmetrised: for a
//! function of a symmetric matrix `A` the returned `Ā` satisfies
//! `df = ⟨Ā, dA⟩` for every symmetric perturbation `dA`.

use super::decomp::tri_solve;
use super::eigen::{EigPair, GenEigDecomp};
use super::matrix::dot;
use super::{LinalgError, Matrix};

/// Relative floor applied to eigenvalue gaps in [`vjp_sym_eig`].
pub const GAP_FLOOR: f64 = 1e-8;

/// Cotangents for the outputs of [`super::sym_eig`], indexed like its pairs.
#[derive(Clone, Debug)]
pub struct EigCotangent {
    pub values: Vec<f64>,
    pub vectors: Vec<Option<Vec<f64>>>,
}

impl EigCotangent {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            vectors: vec![None; n],
        }
    }
}

/// Adjoint of a symmetric eigendecomposition plus the number of eigenvalue
/// gaps that had to be clamped.
#[derive(Clone, Debug)]
pub struct EigAdjoint {
    pub adjoint: Matrix,
    pub clamped: usize,
}

/// VJP of the symmetric eigendecomposition.
///
/// Uses `dλ_k = u_kᵀ dA u_k` and
/// `du_k = Σ_{j≠k} (u_jᵀ dA u_k) / (λ_k − λ_j) · u_j`.
/// Gaps smaller than `GAP_FLOOR · max|λ|` are clamped to that floor (keeping
/// their sign) and counted in [`EigAdjoint::clamped`].
pub fn vjp_sym_eig(pairs: &[EigPair], cot: &EigCotangent) -> EigAdjoint {
    let n = pairs.len();
    assert_eq!(cot.values.len(), n);
    assert_eq!(cot.vectors.len(), n);
    let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.value.abs()));
    let floor = GAP_FLOOR * if scale > 0.0 { scale } else { 1.0 };

    let mut adj = Matrix::zeros(n, n);
    let mut clamped = 0;
    for (k, pk) in pairs.iter().enumerate() {
        if cot.values[k] != 0.0 {
            adj.add_assign(&Matrix::outer(&pk.vector, &pk.vector).scale(cot.values[k]));
        }
        let Some(ubar) = cot.vectors[k].as_ref() else {
            continue;
        };
        assert_eq!(ubar.len(), n);
        // Σ_j coef_j u_j, then outer with u_k.
        let mut left = vec![0.0; n];
        for (j, pj) in pairs.iter().enumerate() {
            if j == k {
                continue;
            }
            let proj = dot(&pj.vector, ubar);
            if proj == 0.0 {
                continue;
            }
            let mut gap = pk.value - pj.value;
            if gap.abs() < floor {
                clamped += 1;
                let sign = if gap > 0.0 || (gap == 0.0 && k > j) {
                    1.0
                } else {
                    -1.0
                };
                gap = sign * floor;
            }
            let coef = proj / gap;
            for (l, &x) in left.iter_mut().zip(&pj.vector) {
                *l += coef * x;
            }
        }
        adj.add_assign(&Matrix::outer(&left, &pk.vector));
    }
    EigAdjoint {
        adjoint: adj.symmetrized(),
        clamped,
    }
}

/// VJP of [`super::cholesky`]: given `L` and `L̄`, returns the symmetric `Ā`.
///
/// `Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` where `Φ` keeps the lower triangle and halves
/// the diagonal. Only the lower triangle of `L̄` is read.
pub fn vjp_cholesky(l: &Matrix, l_bar: &Matrix) -> Result<Matrix, LinalgError> {
    let n = l.rows();
    let mut p = l.t_matmul(&l_bar.tril());
    for i in 0..n {
        p[(i, i)] *= 0.5;
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
    }
    // M = L⁻ᵀ P, then Ā = M L⁻¹ = (L⁻ᵀ Mᵀ)ᵀ
    let m = tri_solve(l, &p, true)?;
    let a_bar = tri_solve(l, &m.transpose(), true)?.transpose();
    Ok(a_bar.symmetrized())
}

/// Adjoints of [`super::tri_solve`].
#[derive(Clone, Debug)]
pub struct TriSolveAdjoint {
    /// Lower-triangular adjoint of `L`.
    pub l_bar: Matrix,
    pub b_bar: Matrix,
}

/// VJP of `X = L⁻¹B` (or `X = L⁻ᵀB` when `transposed`), given the solution `X`.
pub fn vjp_tri_solve(
    l: &Matrix,
    x: &Matrix,
    x_bar: &Matrix,
    transposed: bool,
) -> Result<TriSolveAdjoint, LinalgError> {
    if transposed {
        let b_bar = tri_solve(l, x_bar, false)?;
        let l_bar = x.matmul_t(&b_bar).scale(-1.0).tril();
        Ok(TriSolveAdjoint { l_bar, b_bar })
    } else {
        let b_bar = tri_solve(l, x_bar, true)?;
        let l_bar = b_bar.matmul_t(x).scale(-1.0).tril();
        Ok(TriSolveAdjoint { l_bar, b_bar })
    }
}

/// Adjoints of the top generalized eigenpair with respect to both matrices.
#[derive(Clone, Debug)]
pub struct GenEigAdjoint {
    pub s_a_bar: Matrix,
    pub s_n_bar: Matrix,
    pub clamped: usize,
}

/// VJP of [`super::gen_eig_max`] through the Cholesky reduction.
///
/// `w_bar` is the cotangent of the returned unit eigenvector, `lambda_bar`
/// that of the eigenvalue.
pub fn vjp_gen_eig_max(
    d: &GenEigDecomp,
    w_bar: &[f64],
    lambda_bar: f64,
) -> Result<GenEigAdjoint, LinalgError> {
    let n = d.l.rows();
    assert_eq!(w_bar.len(), n);
    let w = &d.pair.vector;

    // w = s·v/‖v‖  ⇒  v̄ = (s/‖v‖)(I − w wᵀ) w̄
    let ww = dot(w, w_bar);
    let v_bar: Vec<f64> = w_bar
        .iter()
        .zip(w)
        .map(|(&g, &wi)| d.sign / d.v_norm * (g - wi * ww))
        .collect();

    // v = L⁻ᵀ u
    let back = vjp_tri_solve(
        &d.l,
        &Matrix::column_vector(&d.v),
        &Matrix::column_vector(&v_bar),
        true,
    )?;
    let mut l_bar = back.l_bar;
    let u_bar = back.b_bar.into_vec();

    let mut cot = EigCotangent::zeros(n);
    cot.values[n - 1] = lambda_bar;
    cot.vectors[n - 1] = Some(u_bar);
    let eig = vjp_sym_eig(&d.reduced, &cot);

    // C = sym(C_raw); the adjoint is already symmetric.
    let c_bar = eig.adjoint;
    // C_raw = L⁻¹ Yᵀ
    let back = vjp_tri_solve(&d.l, &d.c_raw, &c_bar, false)?;
    l_bar.add_assign(&back.l_bar);
    let y_bar = back.b_bar.transpose();
    // Y = L⁻¹ S_A
    let back = vjp_tri_solve(&d.l, &d.y, &y_bar, false)?;
    l_bar.add_assign(&back.l_bar);
    let s_a_bar = back.b_bar.symmetrized();

    let s_n_bar = vjp_cholesky(&d.l, &l_bar)?;
    Ok(GenEigAdjoint {
        s_a_bar,
        s_n_bar,
        clamped: eig.clamped,
    })
}
