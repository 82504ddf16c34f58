use rand::Rng;

use super::AutodiffError;
use crate::linalg::{
    cholesky, fix_sign, gen_eig_max_decomp, norm2, tri_solve, vjp_cholesky, vjp_gen_eig_max,
    vjp_tri_solve, GenEigDecomp, LinalgError, Matrix,
};

/// Values flowing through the tape are dense 2-D matrices.
pub type Tensor = Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Dropout(Var, Matrix),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    RowSums(Var),
    Sum(Var),
    Mean(Var),
    PairwiseDiff(Var, Var),
    AddScaledIdentity(Var, Var),
    Cholesky(Var),
    TriSolve { l: Var, b: Var, transposed: bool },
    GenEigMax { s_a: Var, s_n: Var, decomp: Box<GenEigDecomp> },
    NormalizeSigned { input: Var, norm: f64, sign: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation as it is evaluated so it can be differentiated in
/// reverse.
///
/// Nodes only refer to earlier nodes, so the tape is acyclic by
/// construction and the reverse pass is a single backwards sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Eigenvalue gaps clamped while differentiating eigenproblems.
    pub clamped_gaps: usize,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, materialising zeros for unreached nodes.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a)),
                _ => None,
            })
            .flat_map(|m| m.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = broadcast_rows(self.value(a), self.value(row), 1.0);
        self.push(v, Op::AddRow(a, row))
    }

    /// Subtracts a `1×n` row from every row of an `m×n` matrix.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let v = broadcast_rows(self.value(a), self.value(row), -1.0);
        self.push(v, Op::SubRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Inverted dropout: keeps each entry with probability `1 − rate` and
    /// rescales survivors by `1/(1 − rate)`. Identity when not training or
    /// when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        if !training || rate == 0.0 {
            return a;
        }
        let (r, c) = self.value(a).shape();
        let mask = dropout_mask(r, c, rate, rng);
        let v = self.value(a).hadamard(&mask);
        self.push(v, Op::Dropout(a, mask))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let mut out = Matrix::zeros(va.rows(), va.cols() + vb.cols());
        for i in 0..va.rows() {
            let row = out.row_mut(i);
            row[..va.cols()].copy_from_slice(va.row(i));
            row[va.cols()..].copy_from_slice(vb.row(i));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Repeats a `1×n` row `m` times.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(m * va.cols());
        for _ in 0..m {
            data.extend_from_slice(va.data());
        }
        let v = Matrix::from_vec(m, va.cols(), data);
        self.push(v, Op::RepeatRows(a))
    }

    /// Column-wise mean: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.rows() > 0, "mean over zero rows");
        let v = col_sums(va).scale(1.0 / va.rows() as f64);
        self.push(v, Op::MeanRows(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a, start))
    }

    /// Row sums: `m×n → m×1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::from_vec(va.rows(), 1, (0..va.rows()).map(|i| va.row(i).iter().sum()).collect());
        self.push(v, Op::RowSums(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(!va.is_empty(), "mean of empty tensor");
        let v = Matrix::scalar(va.sum() / va.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// `out[i][j] = a[i] − b[j]` for column vectors `a` (m×1) and `b` (n×1).
    pub fn pairwise_diff(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.cols() == 1 && vb.cols() == 1, "pairwise_diff expects column vectors");
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        for i in 0..va.rows() {
            for j in 0..vb.rows() {
                out[(i, j)] = va[(i, 0)] - vb[(j, 0)];
            }
        }
        self.push(out, Op::PairwiseDiff(a, b))
    }

    /// `A + s·I` for square `A` and 1×1 `s`.
    pub fn add_scaled_identity(&mut self, a: Var, s: Var) -> Var {
        let mut v = self.value(a).clone();
        assert!(v.is_square(), "add_scaled_identity needs a square matrix");
        let shift = self.scalar(s);
        for i in 0..v.rows() {
            v[(i, i)] += shift;
        }
        self.push(v, Op::AddScaledIdentity(a, s))
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var, LinalgError> {
        let l = cholesky(self.value(a))?;
        Ok(self.push(l, Op::Cholesky(a)))
    }

    pub fn tri_solve(&mut self, l: Var, b: Var, transposed: bool) -> Result<Var, LinalgError> {
        let x = tri_solve(self.value(l), self.value(b), transposed)?;
        Ok(self.push(x, Op::TriSolve { l, b, transposed }))
    }

    /// Top generalized eigenvector (J×1) of `(S_A, S_N)`, with its eigenvalue
    /// returned as a non-differentiated diagnostic.
    pub fn gen_eig_max(&mut self, s_a: Var, s_n: Var) -> Result<(Var, f64), LinalgError> {
        let decomp = gen_eig_max_decomp(self.value(s_a), self.value(s_n))?;
        let w = Matrix::column_vector(decomp.vector());
        let lambda = decomp.value();
        let var = self.push(
            w,
            Op::GenEigMax {
                s_a,
                s_n,
                decomp: Box::new(decomp),
            },
        );
        Ok((var, lambda))
    }

    /// Scales a column vector to unit norm with its largest-magnitude entry
    /// positive. Returns `None` for a zero vector.
    pub fn normalize_signed(&mut self, a: Var) -> Option<Var> {
        let va = self.value(a);
        assert_eq!(va.cols(), 1, "normalize_signed expects a column vector");
        let norm = norm2(va.data());
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let mut out: Vec<f64> = va.data().iter().map(|x| x / norm).collect();
        let sign = fix_sign(&mut out);
        let v = Matrix::column_vector(&out);
        Some(self.push(v, Op::NormalizeSigned { input: a, norm, sign }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut clamped_gaps = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, col_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::SubRow(a, row) => {
                    accumulate(&mut grads, *row, col_sums(&g).scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b));
                    let gb = g.hadamard(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |g, x| 2.0 * g * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
                Op::Exp(a) => accumulate(&mut grads, *a, g.hadamard(y)),
                Op::Dropout(a, mask) => accumulate(&mut grads, *a, g.hadamard(mask)),
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Matrix::zeros(g.rows(), ca);
                    let mut gb = Matrix::zeros(g.rows(), cb);
                    for i in 0..g.rows() {
                        ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                        gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::RepeatRows(a) => accumulate(&mut grads, *a, col_sums(&g)),
                Op::MeanRows(a) => {
                    let m = self.value(*a).rows();
                    let row = g.scale(1.0 / m as f64);
                    let mut data = Vec::with_capacity(m * row.cols());
                    for _ in 0..m {
                        data.extend_from_slice(row.data());
                    }
                    accumulate(&mut grads, *a, Matrix::from_vec(m, row.cols(), data));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).iter_mut().for_each(|x| *x = g[(i, 0)]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64));
                }
                Op::PairwiseDiff(a, b) => {
                    let ga = Matrix::from_vec(g.rows(), 1, (0..g.rows()).map(|i| g.row(i).iter().sum()).collect());
                    let gb = col_sums(&g).scale(-1.0).transpose();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddScaledIdentity(a, s) => {
                    accumulate(&mut grads, *s, Matrix::scalar(g.trace()));
                    accumulate(&mut grads, *a, g);
                }
                Op::Cholesky(a) => accumulate(&mut grads, *a, vjp_cholesky(y, &g)?),
                Op::TriSolve { l, b, transposed } => {
                    let adj = vjp_tri_solve(self.value(*l), y, &g, *transposed)?;
                    accumulate(&mut grads, *l, adj.l_bar);
                    accumulate(&mut grads, *b, adj.b_bar);
                }
                Op::GenEigMax { s_a, s_n, decomp } => {
                    let adj = vjp_gen_eig_max(decomp, g.data(), 0.0)?;
                    clamped_gaps += adj.clamped;
                    accumulate(&mut grads, *s_a, adj.s_a_bar);
                    accumulate(&mut grads, *s_n, adj.s_n_bar);
                }
                Op::NormalizeSigned { input, norm, sign } => {
                    let yg = crate::linalg::dot(y.data(), g.data());
                    let ga = g.zip_map(y, |gi, yi| sign / norm * (gi - yi * yg));
                    accumulate(&mut grads, *input, ga);
                }
            }
        }
        Ok(Gradients { grads, clamped_gaps })
    }
}

fn broadcast_rows(a: &Matrix, row: &Matrix, sign: f64) -> Matrix {
    assert!(
        row.rows() == 1 && row.cols() == a.cols(),
        "row broadcast shape mismatch: {:?} vs {:?}",
        a.shape(),
        row.shape()
    );
    let mut out = a.clone();
    for i in 0..a.rows() {
        for (o, r) in out.row_mut(i).iter_mut().zip(row.data()) {
            *o += sign * r;
        }
    }
    out
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect(),
    )
}

/// Dropout on a plain tensor, outside any tape.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, training: bool, rng: &mut R) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if !training || rate == 0.0 {
        return x.clone();
    }
    x.hadamard(&dropout_mask(x.rows(), x.cols(), rate, rng))
}
