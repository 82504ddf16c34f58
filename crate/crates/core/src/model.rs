//! The meta-anomaly model: set encoder, task-conditioned embedding, fixed
//! center, and the per-task adaptation modes.
//!
//! Every computation is recorded on an [`autodiff::Tape`](crate::autodiff::Tape)
//! through [`Forward`]; the value-level helpers on [`ModelParams`] build a
//! throwaway tape with dropout off, so training and inference share a single
//! code path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{sample_episode, DataError, Episode, EpisodeSpec, LabeledDataset, SupportSet};
use crate::linalg::{LinalgError, Matrix};
use crate::objective::{episode_loss_on_tape, EpisodeScore};
use crate::rng::StreamRng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("support set has no anomalous instances")]
    NoAnomalies,
    #[error("support set has no normal instances")]
    NoNormals,
    #[error("closed-form adaptation needs exactly one support anomaly, found {0}")]
    NotSingleAnomaly(usize),
    #[error("anomalous support embedding coincides with the center")]
    DegenerateAnomaly,
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("no normal instances available to fix the center")]
    NoNormalInstances,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which adaptation and scoring rule an episode uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Top generalized eigenvector of anomalous vs. normal scatter.
    #[default]
    Eigen,
    /// Closed form `ŵ ∝ S_N⁻¹(z_A − c)` for a single support anomaly.
    SingleAnomaly,
    /// Least-squares projection matrix fitted to normal supports only.
    #[serde(alias = "woanomaly")]
    NormalOnly,
    /// No networks: the eigen adaptation on raw attributes.
    #[serde(rename = "wonn")]
    WoNn,
    /// No projection: squared embedding distance to the center.
    #[serde(rename = "woproj")]
    WoProj,
}

impl Mode {
    /// Whether support anomalies participate in adaptation.
    pub fn uses_support_anomalies(self) -> bool {
        !matches!(self, Mode::NormalOnly)
    }

    pub fn uses_networks(self) -> bool {
        !matches!(self, Mode::WoNn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Eigen => "eigen",
            Mode::SingleAnomaly => "single-anomaly",
            Mode::NormalOnly => "normal-only",
            Mode::WoNn => "wonn",
            Mode::WoProj => "woproj",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eigen" | "full" => Ok(Mode::Eigen),
            "single-anomaly" | "single" => Ok(Mode::SingleAnomaly),
            "normal-only" | "woanomaly" => Ok(Mode::NormalOnly),
            "wonn" => Ok(Mode::WoNn),
            "woproj" => Ok(Mode::WoProj),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// Smallest default ridge used by normal-only adaptation.
pub const RIDGE_FLOOR: f64 = 1e-12;

/// Settings for normal-only adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalOnlyConfig {
    /// Projected dimension `K`.
    pub k: usize,
    /// Ridge for the normal equations; `None` uses `1e-6 · tr(ΦᵀΦ) / J`.
    #[serde(default)]
    pub ridge: Option<f64>,
}

impl Default for NormalOnlyConfig {
    fn default() -> Self {
        Self { k: 32, ridge: None }
    }
}

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Attribute count `M`.
    pub n_attributes: usize,
    pub hidden: usize,
    /// Width of the task representation `r`.
    pub repr_dim: usize,
    /// Embedding width `J`.
    pub embed_dim: usize,
}

impl Architecture {
    pub fn new(n_attributes: usize) -> Self {
        Self {
            n_attributes,
            hidden: 256,
            repr_dim: 256,
            embed_dim: 256,
        }
    }

    /// `f`: three affine maps from `[x, y]` to the pooled feature.
    pub fn f_sizes(&self) -> Vec<usize> {
        vec![self.n_attributes + 1, self.hidden, self.hidden, self.repr_dim]
    }

    /// `g`: three affine maps on the pooled feature.
    pub fn g_sizes(&self) -> Vec<usize> {
        vec![self.repr_dim, self.hidden, self.hidden, self.repr_dim]
    }

    /// `φ`: four bias-free linear maps from `[x, r]` to the embedding.
    pub fn phi_sizes(&self) -> Vec<usize> {
        vec![
            self.n_attributes + self.repr_dim,
            self.hidden,
            self.hidden,
            self.hidden,
            self.embed_dim,
        ]
    }
}

/// Feed-forward network `x ↦ relu(… relu(x W₀ + b₀) …) W_L + b_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `fan_in × fan_out` per layer.
    pub weights: Vec<Matrix>,
    /// `1 × fan_out` per layer, absent for bias-free networks.
    pub biases: Option<Vec<Matrix>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], with_bias: bool, rng: &mut R) -> Self {
        let weights: Vec<Matrix> = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Matrix::from_vec(
                    fan_in,
                    fan_out,
                    (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
            })
            .collect();
        let biases = with_bias.then(|| weights.iter().map(|w| Matrix::zeros(1, w.cols())).collect());
        Self { weights, biases }
    }

    /// All-zero network of the given shape.
    pub fn zeros(sizes: &[usize], with_bias: bool) -> Self {
        let weights: Vec<Matrix> = sizes.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect();
        let biases = with_bias.then(|| weights.iter().map(|w| Matrix::zeros(1, w.cols())).collect());
        Self { weights, biases }
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Matrix::rows)
    }
}

/// All model state: the three networks, `ρ = log η`, and the fixed center.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub f: Mlp,
    pub g: Mlp,
    pub phi: Mlp,
    /// 1×1, `η = exp(ρ)`.
    pub rho: Matrix,
    /// Fixed after initialisation; never trained. Length `J`, or `M` in
    /// [`Mode::WoNn`].
    pub center: Vec<f64>,
}

impl ModelParams {
    /// Fresh parameters with `η = 1` and a zero center (see [`fix_center`]).
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let f = Mlp::init(&arch.f_sizes(), true, rng);
        let g = Mlp::init(&arch.g_sizes(), true, rng);
        let phi = Mlp::init(&arch.phi_sizes(), false, rng);
        Self {
            arch,
            f,
            g,
            phi,
            rho: Matrix::scalar(0.0),
            center: vec![0.0; arch.embed_dim],
        }
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            f: Mlp::zeros(&arch.f_sizes(), true),
            g: Mlp::zeros(&arch.g_sizes(), true),
            phi: Mlp::zeros(&arch.phi_sizes(), false),
            rho: Matrix::scalar(0.0),
            center: vec![0.0; arch.embed_dim],
        }
    }

    pub fn eta(&self) -> f64 {
        self.rho[(0, 0)].exp()
    }

    /// Trainable tensors in canonical order (f, g, φ, ρ).
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for net in [&self.f, &self.g, &self.phi] {
            out.extend(net.weights.iter());
            if let Some(b) = &net.biases {
                out.extend(b.iter());
            }
        }
        out.push(&self.rho);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for net in [&mut self.f, &mut self.g, &mut self.phi] {
            out.extend(net.weights.iter_mut());
            if let Some(b) = &mut net.biases {
                out.extend(b.iter_mut());
            }
        }
        out.push(&mut self.rho);
        out
    }

    /// Names matching [`Self::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (tag, net) in [("f", &self.f), ("g", &self.g), ("phi", &self.phi)] {
            out.extend((0..net.depth()).map(|l| format!("{tag}.w{l}")));
            if net.biases.is_some() {
                out.extend((0..net.depth()).map(|l| format!("{tag}.b{l}")));
            }
        }
        out.push("rho".to_string());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|m| m.is_finite()) && self.center.iter().all(|c| c.is_finite())
    }

    fn check_attributes(&self, what: &'static str, m: &Matrix) -> Result<(), ModelError> {
        if m.cols() != self.arch.n_attributes && m.rows() > 0 {
            return Err(ModelError::DimensionMismatch {
                what,
                expected: self.arch.n_attributes,
                found: m.cols(),
            });
        }
        Ok(())
    }

    /// Task representation `r = g(mean f([x, y]))` over the whole support set.
    pub fn encode_task(&self, support: &SupportSet) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, self, None);
        let r = fwd.encode_task(support)?;
        Ok(tape.value(r).data().to_vec())
    }

    /// Embeds each row of `x` (n×M) under representation `r`: n×J.
    pub fn embed(&self, x: &Matrix, r: &[f64]) -> Result<Matrix, ModelError> {
        self.check_attributes("instance", x)?;
        if r.len() != self.arch.repr_dim {
            return Err(ModelError::DimensionMismatch {
                what: "task representation",
                expected: self.arch.repr_dim,
                found: r.len(),
            });
        }
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, self, None);
        let r = fwd.tape.leaf(Matrix::row_vector(r));
        let z = fwd.embed(x, r);
        Ok(tape.value(z).clone())
    }

    /// `(S_A, S_N)` for a support set under representation `r`.
    pub fn scatter_matrices(&self, support: &SupportSet, r: &[f64]) -> Result<(Matrix, Matrix), ModelError> {
        if support.n_anomaly() == 0 {
            return Err(ModelError::NoAnomalies);
        }
        if support.n_normal() == 0 {
            return Err(ModelError::NoNormals);
        }
        let z_a = self.embed(&support.anomalies, r)?;
        let z_n = self.embed(&support.normals, r)?;
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, self, None);
        let z_a = fwd.tape.leaf(z_a);
        let z_n = fwd.tape.leaf(z_n);
        let c = fwd.vars.center;
        let s_a = fwd.scatter(z_a, c);
        let s_n = fwd.regularized_scatter(z_n, c);
        Ok((tape.value(s_a).clone(), tape.value(s_n).clone()))
    }

    /// Generalized-eigenproblem adaptation.
    pub fn adapt(&self, support: &SupportSet) -> Result<AdaptationResult, ModelError> {
        self.adapt_with(support, Mode::Eigen, &NormalOnlyConfig::default())
    }

    /// Single-anomaly closed form.
    pub fn adapt_single(&self, support: &SupportSet) -> Result<AdaptationResult, ModelError> {
        self.adapt_with(support, Mode::SingleAnomaly, &NormalOnlyConfig::default())
    }

    /// Least-squares projection from normal supports only.
    pub fn adapt_normal_only(
        &self,
        support: &SupportSet,
        cfg: &NormalOnlyConfig,
    ) -> Result<AdaptationResult, ModelError> {
        self.adapt_with(support, Mode::NormalOnly, cfg)
    }

    pub fn adapt_with(
        &self,
        support: &SupportSet,
        mode: Mode,
        cfg: &NormalOnlyConfig,
    ) -> Result<AdaptationResult, ModelError> {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, self, None);
        let adapted = fwd.adapt(support, mode, cfg)?;
        Ok(adapted.to_result(&tape))
    }

    /// Anomaly scores of the rows of `x` under an adaptation of this model.
    pub fn anomaly_score(&self, x: &Matrix, adaptation: &AdaptationResult) -> Result<Vec<f64>, ModelError> {
        self.check_attributes("instance", x)?;
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, self, None);
        let adapted = Adapted::from_result(fwd.tape, adaptation);
        let z = match adapted.repr {
            Some(r) => fwd.embed(x, r),
            None => fwd.tape.leaf(x.clone()),
        };
        if tape.value(z).cols() != self.center.len() {
            return Err(ModelError::DimensionMismatch {
                what: "embedding",
                expected: self.center.len(),
                found: tape.value(z).cols(),
            });
        }
        let mut fwd = Forward::new(&mut tape, self, None);
        let scores = fwd.score(z, &adapted);
        Ok(tape.value(scores).data().to_vec())
    }

    /// Adapts on the episode's support and scores its queries.
    pub fn score_episode(
        &self,
        episode: &Episode,
        mode: Mode,
        cfg: &NormalOnlyConfig,
    ) -> Result<EpisodeScore, ModelError> {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, self, None);
        let out = fwd.episode(episode, mode, cfg)?;
        Ok(out.scores(&tape))
    }
}

/// A task-specific projection.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    /// Unit vector `ŵ ∈ R^J`.
    Vector(Vec<f64>),
    /// `Ŵ ∈ R^{J×K}` with its center in `R^K`.
    Matrix { w: Matrix, center: Vec<f64> },
    /// No projection.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationResult {
    pub projection: Projection,
    /// Top generalized eigenvalue (the optimal Rayleigh quotient) when the
    /// mode has one.
    pub lambda: Option<f64>,
    /// Task representation; `None` when the mode has no networks.
    pub r: Option<Vec<f64>>,
}

impl AdaptationResult {
    pub fn w(&self) -> Option<&[f64]> {
        match &self.projection {
            Projection::Vector(w) => Some(w),
            _ => None,
        }
    }
}

/// Adaptation outputs as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct Adapted {
    pub repr: Option<Var>,
    pub kind: AdaptedKind,
}

#[derive(Clone, Copy, Debug)]
pub enum AdaptedKind {
    Vector { w: Var, lambda: f64 },
    Matrix { w: Var, center: Var },
    Identity,
}

impl Adapted {
    fn to_result(self, tape: &Tape) -> AdaptationResult {
        let r = self.repr.map(|r| tape.value(r).data().to_vec());
        let (projection, lambda) = match self.kind {
            AdaptedKind::Vector { w, lambda } => (Projection::Vector(tape.value(w).data().to_vec()), Some(lambda)),
            AdaptedKind::Matrix { w, center } => (
                Projection::Matrix {
                    w: tape.value(w).clone(),
                    center: tape.value(center).data().to_vec(),
                },
                None,
            ),
            AdaptedKind::Identity => (Projection::Identity, None),
        };
        AdaptationResult { projection, lambda, r }
    }

    fn from_result(tape: &mut Tape, a: &AdaptationResult) -> Self {
        let repr = a.r.as_ref().map(|r| tape.leaf(Matrix::row_vector(r)));
        let kind = match &a.projection {
            Projection::Vector(w) => AdaptedKind::Vector {
                w: tape.leaf(Matrix::column_vector(w)),
                lambda: a.lambda.unwrap_or(f64::NAN),
            },
            Projection::Matrix { w, center } => AdaptedKind::Matrix {
                w: tape.leaf(w.clone()),
                center: tape.leaf(Matrix::row_vector(center)),
            },
            Projection::Identity => AdaptedKind::Identity,
        };
        Self { repr, kind }
    }
}

#[derive(Clone, Debug)]
struct BoundMlp {
    weights: Vec<Var>,
    biases: Option<Vec<Var>>,
}

impl BoundMlp {
    fn bind(tape: &mut Tape, net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: net
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| tape.leaf(b.clone())).collect()),
        }
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.weights
            .iter()
            .copied()
            .chain(self.biases.iter().flatten().copied())
    }
}

/// Parameters bound as tape leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    f: BoundMlp,
    g: BoundMlp,
    phi: BoundMlp,
    pub rho: Var,
    /// 1×len(center), a constant.
    pub center: Var,
}

impl BoundParams {
    /// Trainable leaves in the order of [`ModelParams::trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.f.vars().chain(self.g.vars()).chain(self.phi.vars()).collect();
        out.push(self.rho);
        out
    }
}

/// Tape outputs of one episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeOutput {
    pub loss: Var,
    /// `N_A^Q × 1`
    pub anomaly_scores: Var,
    /// `N_N^Q × 1`
    pub normal_scores: Var,
    pub adapted: Adapted,
}

impl EpisodeOutput {
    pub fn scores(&self, tape: &Tape) -> EpisodeScore {
        EpisodeScore::new(
            tape.value(self.anomaly_scores).data().to_vec(),
            tape.value(self.normal_scores).data().to_vec(),
        )
    }
}

/// One forward pass under construction.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub vars: BoundParams,
    params: &'a ModelParams,
    dropout: Option<(f64, &'a mut StreamRng)>,
}

impl<'a> Forward<'a> {
    /// Binds `params` onto `tape`. `dropout = Some((rate, rng))` enables
    /// training-time dropout on every hidden layer.
    pub fn new(tape: &'a mut Tape, params: &'a ModelParams, dropout: Option<(f64, &'a mut StreamRng)>) -> Self {
        let vars = BoundParams {
            f: BoundMlp::bind(tape, &params.f),
            g: BoundMlp::bind(tape, &params.g),
            phi: BoundMlp::bind(tape, &params.phi),
            rho: tape.leaf(params.rho.clone()),
            center: tape.leaf(Matrix::row_vector(&params.center)),
        };
        Self {
            tape,
            vars,
            params,
            dropout,
        }
    }

    fn mlp(&mut self, net: &BoundMlp, x: Var) -> Var {
        let depth = net.weights.len();
        let mut h = x;
        for l in 0..depth {
            h = self.tape.matmul(h, net.weights[l]);
            if let Some(b) = &net.biases {
                h = self.tape.add_row(h, b[l]);
            }
            if l + 1 < depth {
                h = self.tape.relu(h);
                if let Some((rate, rng)) = self.dropout.as_mut() {
                    h = self.tape.dropout(h, *rate, true, &mut **rng);
                }
            }
        }
        h
    }

    /// `r = g(mean over the support of f([x, y]))`, a 1×R node.
    pub fn encode_task(&mut self, support: &SupportSet) -> Result<Var, ModelError> {
        if support.is_empty() {
            return Err(ModelError::EmptySupport);
        }
        self.params.check_attributes("support normal", &support.normals)?;
        self.params.check_attributes("support anomaly", &support.anomalies)?;
        let m = self.params.arch.n_attributes;
        let mut rows = Matrix::zeros(support.len(), m + 1);
        for (i, (src, label)) in (0..support.n_normal())
            .map(|i| (support.normals.row(i), 0.0))
            .chain((0..support.n_anomaly()).map(|i| (support.anomalies.row(i), 1.0)))
            .enumerate()
        {
            let row = rows.row_mut(i);
            row[..m].copy_from_slice(src);
            row[m] = label;
        }
        let input = self.tape.leaf(rows);
        let f = self.vars.f.clone();
        let g = self.vars.g.clone();
        let h = self.mlp(&f, input);
        let pooled = self.tape.mean_rows(h);
        Ok(self.mlp(&g, pooled))
    }

    /// `φ([x, r])` for each row of `x`.
    pub fn embed(&mut self, x: &Matrix, r: Var) -> Var {
        let x = self.tape.leaf(x.clone());
        let rr = self.tape.repeat_rows(r, self.tape.value(x).rows());
        let input = self.tape.concat_cols(x, rr);
        let phi = self.vars.phi.clone();
        self.mlp(&phi, input)
    }

    /// `(1/n) Σ (z − c)(z − c)ᵀ` over the rows of `z`.
    pub fn scatter(&mut self, z: Var, c: Var) -> Var {
        let n = self.tape.value(z).rows();
        let d = self.tape.sub_row(z, c);
        let dt = self.tape.transpose(d);
        let s = self.tape.matmul(dt, d);
        self.tape.scale(s, 1.0 / n as f64)
    }

    /// Normal scatter plus `η I`.
    pub fn regularized_scatter(&mut self, z: Var, c: Var) -> Var {
        let s = self.scatter(z, c);
        let eta = self.tape.exp(self.vars.rho);
        self.tape.add_scaled_identity(s, eta)
    }

    fn support_embeddings(&mut self, support: &SupportSet, mode: Mode) -> Result<(Option<Var>, Var, Option<Var>), ModelError> {
        if support.n_normal() == 0 {
            return Err(ModelError::NoNormals);
        }
        let effective;
        let support = if mode.uses_support_anomalies() {
            support
        } else {
            effective = SupportSet::new(
                support.normals.clone(),
                Matrix::zeros(0, support.normals.cols()),
            );
            &effective
        };
        if !mode.uses_networks() {
            self.params.check_attributes("support normal", &support.normals)?;
            self.params.check_attributes("support anomaly", &support.anomalies)?;
            let z_n = self.tape.leaf(support.normals.clone());
            let z_a = (support.n_anomaly() > 0).then(|| self.tape.leaf(support.anomalies.clone()));
            return Ok((None, z_n, z_a));
        }
        let r = self.encode_task(support)?;
        let stacked = support.normals.vstack(&support.anomalies);
        let z = self.embed(&stacked, r);
        let n_n = support.n_normal();
        let z_n = self.tape.slice_rows(z, 0, n_n);
        let z_a = (support.n_anomaly() > 0).then(|| self.tape.slice_rows(z, n_n, support.len()));
        Ok((Some(r), z_n, z_a))
    }

    /// Adapts to `support` under `mode`.
    pub fn adapt(&mut self, support: &SupportSet, mode: Mode, cfg: &NormalOnlyConfig) -> Result<Adapted, ModelError> {
        let (repr, z_n, z_a) = self.support_embeddings(support, mode)?;
        let kind = self.adapt_embedded(z_n, z_a, mode, cfg)?;
        Ok(Adapted { repr, kind })
    }

    /// Adapts from already-embedded supports (`z_a = None` when there are no
    /// support anomalies).
    pub fn adapt_embedded(
        &mut self,
        z_n: Var,
        z_a: Option<Var>,
        mode: Mode,
        cfg: &NormalOnlyConfig,
    ) -> Result<AdaptedKind, ModelError> {
        let c = self.vars.center;
        match mode {
            Mode::Eigen | Mode::WoNn => {
                let z_a = z_a.ok_or(ModelError::NoAnomalies)?;
                let s_a = self.scatter(z_a, c);
                let s_n = self.regularized_scatter(z_n, c);
                if !(self.tape.value(s_a).trace() > 1e-14 * self.tape.value(s_n).trace()) {
                    return Err(ModelError::DegenerateAnomaly);
                }
                let (w, lambda) = self.tape.gen_eig_max(s_a, s_n)?;
                Ok(AdaptedKind::Vector { w, lambda })
            }
            Mode::SingleAnomaly => {
                let z_a = z_a.ok_or(ModelError::NoAnomalies)?;
                let n_a = self.tape.value(z_a).rows();
                if n_a != 1 {
                    return Err(ModelError::NotSingleAnomaly(n_a));
                }
                let s_n = self.regularized_scatter(z_n, c);
                let d = self.tape.sub_row(z_a, c);
                let d = self.tape.transpose(d);
                let l = self.tape.cholesky(s_n)?;
                let y = self.tape.tri_solve(l, d, false)?;
                let v = self.tape.tri_solve(l, y, true)?;
                // for rank-one S_A the top eigenvalue is dᵀ S_N⁻¹ d
                let lambda = crate::linalg::dot(self.tape.value(d).data(), self.tape.value(v).data());
                let w = self.tape.normalize_signed(v).ok_or(ModelError::DegenerateAnomaly)?;
                Ok(AdaptedKind::Vector { w, lambda })
            }
            Mode::NormalOnly => {
                let j = self.tape.value(z_n).cols();
                if cfg.k == 0 || cfg.k > j {
                    return Err(ModelError::InvalidConfig(format!(
                        "normal-only projected dimension K={} must lie in 1..={j}",
                        cfg.k
                    )));
                }
                let center_k = self.tape.leaf(Matrix::row_vector(&self.params.center[..cfg.k]));
                let n = self.tape.value(z_n).rows();
                // (ΦᵀΦ + ρI)⁻¹ΦᵀC = Φᵀ(ΦΦᵀ + ρI)⁻¹C
                let phi_t = self.tape.transpose(z_n);
                let gram = self.tape.matmul(z_n, phi_t);
                let ridge = match cfg.ridge {
                    Some(r) if r > 0.0 => self.tape.leaf(Matrix::scalar(r)),
                    Some(r) => {
                        return Err(ModelError::InvalidConfig(format!("ridge must be positive, got {r}")))
                    }
                    None => {
                        // 1e-6 · tr(ΦᵀΦ) / J, kept on the tape so it is differentiated too;
                        // all-zero embeddings fall back to an absolute floor
                        let sq = self.tape.square(z_n);
                        let tr = self.tape.sum(sq);
                        let ridge = self.tape.scale(tr, 1e-6 / j as f64);
                        if self.tape.scalar(ridge) > RIDGE_FLOOR {
                            ridge
                        } else {
                            self.tape.leaf(Matrix::scalar(RIDGE_FLOOR))
                        }
                    }
                };
                let gram = self.tape.add_scaled_identity(gram, ridge);
                let ones = self.tape.leaf(Matrix::filled(n, 1, 1.0));
                let targets = self.tape.matmul(ones, center_k);
                let l = self.tape.cholesky(gram)?;
                let y = self.tape.tri_solve(l, targets, false)?;
                let x = self.tape.tri_solve(l, y, true)?;
                let w = self.tape.matmul(phi_t, x);
                Ok(AdaptedKind::Matrix { w, center: center_k })
            }
            Mode::WoProj => Ok(AdaptedKind::Identity),
        }
    }

    /// Anomaly scores (n×1) of embedded rows `z`.
    pub fn score(&mut self, z: Var, adapted: &Adapted) -> Var {
        let c = self.vars.center;
        match adapted.kind {
            AdaptedKind::Vector { w, .. } => {
                let d = self.tape.sub_row(z, c);
                let p = self.tape.matmul(d, w);
                self.tape.square(p)
            }
            AdaptedKind::Matrix { w, center } => {
                let p = self.tape.matmul(z, w);
                let d = self.tape.sub_row(p, center);
                let sq = self.tape.square(d);
                self.tape.row_sums(sq)
            }
            AdaptedKind::Identity => {
                let d = self.tape.sub_row(z, c);
                let sq = self.tape.square(d);
                self.tape.row_sums(sq)
            }
        }
    }

    /// Adapts on the support, scores the queries, and records the loss
    /// `−smoothed AUC`.
    pub fn episode(&mut self, episode: &Episode, mode: Mode, cfg: &NormalOnlyConfig) -> Result<EpisodeOutput, ModelError> {
        self.params.check_attributes("query anomaly", &episode.query_anomalies)?;
        self.params.check_attributes("query normal", &episode.query_normals)?;
        let support = &episode.support;
        let n_a = if mode.uses_support_anomalies() { support.n_anomaly() } else { 0 };
        if n_a == 0 && !matches!(mode, Mode::NormalOnly | Mode::WoProj) {
            return Err(ModelError::NoAnomalies);
        }
        if support.n_normal() == 0 {
            return Err(ModelError::NoNormals);
        }
        let n_qa = episode.query_anomalies.rows();

        // One pass over support and query instances.
        let (repr, z_sn, z_sa, z_qa, z_qn) = if mode.uses_networks() {
            let effective;
            let support = if n_a == support.n_anomaly() {
                support
            } else {
                effective = SupportSet::new(support.normals.clone(), Matrix::zeros(0, support.normals.cols()));
                &effective
            };
            let r = self.encode_task(support)?;
            let all = support
                .normals
                .vstack(&support.anomalies)
                .vstack(&episode.query_anomalies)
                .vstack(&episode.query_normals);
            let total = all.rows();
            let z = self.embed(&all, r);
            let n_n = support.n_normal();
            let z_sn = self.tape.slice_rows(z, 0, n_n);
            let z_sa = (n_a > 0).then(|| self.tape.slice_rows(z, n_n, n_n + n_a));
            let q0 = n_n + n_a;
            let z_qa = self.tape.slice_rows(z, q0, q0 + n_qa);
            let z_qn = self.tape.slice_rows(z, q0 + n_qa, total);
            (Some(r), z_sn, z_sa, z_qa, z_qn)
        } else {
            let z_sn = self.tape.leaf(support.normals.clone());
            let z_sa = (n_a > 0).then(|| self.tape.leaf(support.anomalies.clone()));
            let z_qa = self.tape.leaf(episode.query_anomalies.clone());
            let z_qn = self.tape.leaf(episode.query_normals.clone());
            (None, z_sn, z_sa, z_qa, z_qn)
        };
        let dim = self.tape.value(z_sn).cols();
        if dim != self.params.center.len() {
            return Err(ModelError::DimensionMismatch {
                what: "center",
                expected: dim,
                found: self.params.center.len(),
            });
        }

        let kind = self.adapt_embedded(z_sn, z_sa, mode, cfg)?;
        let adapted = Adapted { repr, kind };
        let anomaly_scores = self.score(z_qa, &adapted);
        let normal_scores = self.score(z_qn, &adapted);
        let loss = episode_loss_on_tape(self.tape, anomaly_scores, normal_scores);
        Ok(EpisodeOutput {
            loss,
            anomaly_scores,
            normal_scores,
            adapted,
        })
    }
}

/// Mean embedding of normal instances over `n_episodes` sampled training
/// episodes, computed with the current (initial) parameters.
///
/// For modes with networks, if the mean has norm below 0.1 every coordinate
/// with magnitude below 0.1 is pushed to ±0.1 so the center stays away from
/// the collapsed solution. In [`Mode::WoNn`] the result is the mean raw
/// normal attribute vector.
pub fn fix_center(
    params: &ModelParams,
    tasks: &[&LabeledDataset],
    spec: &EpisodeSpec,
    mode: Mode,
    n_episodes: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, ModelError> {
    if tasks.is_empty() || n_episodes == 0 {
        return Err(ModelError::NoNormalInstances);
    }
    let dim = if mode.uses_networks() {
        params.arch.embed_dim
    } else {
        params.arch.n_attributes
    };
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for _ in 0..n_episodes {
        let t = rng.gen_range(0..tasks.len());
        let ep = sample_episode(tasks[t], t, spec, rng)?;
        let normals = ep.support.normals.vstack(&ep.query_normals);
        if normals.rows() == 0 {
            continue;
        }
        let z = if mode.uses_networks() {
            let support = if mode.uses_support_anomalies() {
                ep.support.clone()
            } else {
                SupportSet::new(ep.support.normals.clone(), Matrix::zeros(0, ep.support.normals.cols()))
            };
            let r = params.encode_task(&support)?;
            params.embed(&normals, &r)?
        } else {
            normals
        };
        for i in 0..z.rows() {
            for (s, x) in sum.iter_mut().zip(z.row(i)) {
                *s += x;
            }
        }
        count += z.rows();
    }
    if count == 0 {
        return Err(ModelError::NoNormalInstances);
    }
    let mut c: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
    if mode.uses_networks() {
        apply_center_guard(&mut c);
    }
    Ok(c)
}

/// Minimum center norm before the collapse guard kicks in.
pub const CENTER_GUARD: f64 = 0.1;

/// Pushes near-zero coordinates of a near-zero center to `±0.1`.
/// Returns whether the guard fired.
pub fn apply_center_guard(c: &mut [f64]) -> bool {
    let norm = crate::linalg::norm2(c);
    if norm >= CENTER_GUARD {
        return false;
    }
    for x in c.iter_mut() {
        if x.abs() < CENTER_GUARD {
            *x = if *x < 0.0 { -CENTER_GUARD } else { CENTER_GUARD };
        }
    }
    true
}
