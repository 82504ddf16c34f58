//! Dense double-precision linear algebra: Cholesky, triangular solves,
//! symmetric and generalized symmetric-definite eigenproblems, and the
//! reverse-mode rules for each of them.

mod adjoint;
mod decomp;
mod eigen;
mod matrix;

pub use adjoint::{
    vjp_cholesky, vjp_gen_eig_max, vjp_sym_eig, vjp_tri_solve, EigAdjoint, EigCotangent,
    GenEigAdjoint, TriSolveAdjoint, GAP_FLOOR,
};
pub use decomp::{cholesky, spd_solve, tri_solve};
pub use eigen::{
    fix_sign, gen_eig_max, gen_eig_max_decomp, quad_form, rayleigh_quotient, sym_eig, EigPair,
    GenEigDecomp,
};
pub use matrix::Matrix;

pub(crate) use matrix::{dot, norm2};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("triangular matrix is singular at diagonal entry {index}")]
    SingularTriangular { index: usize },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:e})")]
    NoConvergence { sweeps: usize, off_diagonal: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("empty matrix")]
    Empty,
}
