//! Dataset ingestion, multi-task synthesis and episode sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: row {row}: label {value} is not 0 or 1")]
    NonBinaryLabel { path: PathBuf, row: usize, value: f64 },
    #[error("{path}: label column '{column}' not found")]
    MissingLabelColumn { path: PathBuf, column: String },
    #[error("task '{task}' has {available} {class} instances, episode needs {required}")]
    InsufficientInstances {
        task: String,
        class: &'static str,
        available: usize,
        required: usize,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("no {0} tasks in bundle")]
    EmptySplit(Split),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Instances of one task with binary anomaly labels (1 = anomaly).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub feature_names: Vec<String>,
    /// N×M
    pub attributes: Matrix,
    pub labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, attributes: Matrix, labels: Vec<u8>) -> Self {
        assert_eq!(attributes.rows(), labels.len(), "one label per instance");
        let feature_names = (0..attributes.cols()).map(|j| format!("x{j}")).collect();
        Self {
            name: name.into(),
            feature_names,
            attributes,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.cols()
    }

    pub fn anomaly_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    pub fn normal_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 0).collect()
    }

    fn gather(&self, idx: &[usize]) -> Matrix {
        let m = self.n_attributes();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(self.attributes.row(i));
        }
        Matrix::from_vec(idx.len(), m, data)
    }

    /// Whether an episode of the given shape can be drawn.
    pub fn supports(&self, spec: &EpisodeSpec) -> bool {
        self.anomaly_indices().len() >= spec.n_anomaly + spec.n_query_anomaly
            && self.normal_indices().len() >= spec.n_normal + spec.n_query_normal
    }
}

/// Column-wise standardisation. Returns the transformed dataset and the
/// names of zero-variance columns that were dropped.
pub fn standardize(ds: &LabeledDataset) -> (LabeledDataset, Vec<String>) {
    let (n, m) = ds.attributes.shape();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut stats = Vec::new();
    for j in 0..m {
        let col = ds.attributes.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            dropped.push(ds.feature_names[j].clone());
        } else {
            kept.push(j);
            stats.push((mean, std));
        }
    }
    let mut attrs = Matrix::zeros(n, kept.len());
    for i in 0..n {
        for (k, (&j, &(mean, std))) in kept.iter().zip(&stats).enumerate() {
            attrs[(i, k)] = (ds.attributes[(i, j)] - mean) / std;
        }
    }
    let out = LabeledDataset {
        name: ds.name.clone(),
        feature_names: kept.iter().map(|&j| ds.feature_names[j].clone()).collect(),
        attributes: attrs,
        labels: ds.labels.clone(),
    };
    (out, dropped)
}

/// Reads a headed numeric CSV with one 0/1 label column.
///
/// With `normalize`, each attribute is standardised to zero mean and unit
/// (population) standard deviation over the file; constant columns are
/// dropped with a warning.
pub fn load_csv(path: &Path, label_column: &str, normalize: bool) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn {
            path: path.to_path_buf(),
            column: label_column.to_string(),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != headers.len() {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                message: format!("row {row} has {} fields, header has {}", record.len(), headers.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                DataError::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: headers[j].to_string(),
                    value: cell.to_string(),
                }
            })?;
            if j == label_idx {
                if value != 0.0 && value != 1.0 {
                    return Err(DataError::NonBinaryLabel {
                        path: path.to_path_buf(),
                        row,
                        value,
                    });
                }
                labels.push(value as u8);
            } else {
                data.push(value);
            }
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ds = LabeledDataset {
        name,
        attributes: Matrix::from_vec(labels.len(), feature_names.len(), data),
        feature_names,
        labels,
    };
    if !normalize {
        return Ok(ds);
    }
    let (ds, dropped) = standardize(&ds);
    for col in dropped {
        log::warn!("{}: dropping zero-variance column '{col}'", path.display());
    }
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::io(path, io),
        other => DataError::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes `ds` as CSV with its feature names and a trailing `label` column.
/// Values use Rust's shortest round-trip formatting, so a reload is exact.
pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push("label");
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.attributes.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Target,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Target => "target",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" => Ok(Split::Validation),
            "target" | "test" => Ok(Split::Target),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Tasks with a disjoint, exhaustive train/validation/target assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub tasks: Vec<LabeledDataset>,
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl TaskBundle {
    pub fn new(tasks: Vec<LabeledDataset>, splits: Vec<Split>, seed: u64) -> Self {
        assert_eq!(tasks.len(), splits.len(), "one split per task");
        Self { tasks, splits, seed }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.tasks.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledDataset> {
        self.indices(split).into_iter().map(|i| &self.tasks[i]).collect()
    }

    pub fn n_attributes(&self) -> usize {
        self.tasks.first().map_or(0, LabeledDataset::n_attributes)
    }
}

/// An `M×M` matrix with i.i.d. `Uniform[−1, 1]` entries.
pub fn random_task_matrix<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(m, m, (0..m * m).map(|_| rng.gen_range(-1.0..=1.0)).collect())
}

/// Maps every instance `x` to `x · Rᵀ`; labels are kept.
pub fn apply_task_matrix(base: &LabeledDataset, r: &Matrix, name: impl Into<String>) -> LabeledDataset {
    LabeledDataset {
        name: name.into(),
        feature_names: base.feature_names.clone(),
        attributes: base.attributes.matmul_t(r),
        labels: base.labels.clone(),
    }
}

/// Builds `n_train + n_valid + n_target` tasks from `base`, each through its
/// own random linear map. Task `t`'s matrix depends only on `(seed, t)`.
pub fn synthesize_tasks(
    base: &LabeledDataset,
    n_train: usize,
    n_valid: usize,
    n_target: usize,
    seed: u64,
) -> TaskBundle {
    let total = n_train + n_valid + n_target;
    let m = base.n_attributes();
    let mut tasks = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for t in 0..total {
        let mut task_rng = rng::stream(seed, &[0x7a5c, t as u64]);
        let r = random_task_matrix(m, &mut task_rng);
        tasks.push(apply_task_matrix(base, &r, format!("{}_task{t:04}", base.name)));
        splits.push(split_of(t, n_train, n_valid));
    }
    TaskBundle::new(tasks, splits, seed)
}

fn split_of(t: usize, n_train: usize, n_valid: usize) -> Split {
    if t < n_train {
        Split::Train
    } else if t < n_train + n_valid {
        Split::Validation
    } else {
        Split::Target
    }
}

/// A two-dimensional synthetic task family: normals from a standard
/// Gaussian, anomalies uniformly on a circle, and each task seen through its
/// own rotation and per-axis scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingFamily {
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub radius: f64,
    /// Per-axis scale factors are drawn from `[min, max]`.
    pub scale_range: (f64, f64),
}

impl Default for RingFamily {
    fn default() -> Self {
        Self {
            n_normal: 200,
            n_anomaly: 40,
            radius: 4.0,
            scale_range: (0.5, 2.0),
        }
    }
}

impl RingFamily {
    /// Untransformed instances: normals first, then anomalies.
    pub fn base<R: Rng + ?Sized>(&self, rng: &mut R) -> LabeledDataset {
        let n = self.n_normal + self.n_anomaly;
        let mut x = Matrix::zeros(n, 2);
        for i in 0..self.n_normal {
            x[(i, 0)] = rng.sample(StandardNormal);
            x[(i, 1)] = rng.sample(StandardNormal);
        }
        for i in self.n_normal..n {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            x[(i, 0)] = self.radius * angle.cos();
            x[(i, 1)] = self.radius * angle.sin();
        }
        let labels = (0..n).map(|i| u8::from(i >= self.n_normal)).collect();
        LabeledDataset::new("ring", x, labels)
    }

    /// `R(θ) · diag(s₁, s₂)` with `θ` uniform and `s` in the scale range.
    pub fn task_matrix<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let (lo, hi) = self.scale_range;
        let s = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
        let (c, sn) = (theta.cos(), theta.sin());
        Matrix::from_rows(&[[c * s[0], -sn * s[1]], [sn * s[0], c * s[1]]])
    }

    /// Task `t` depends only on `(seed, t)`.
    pub fn task(&self, seed: u64, t: usize) -> LabeledDataset {
        let mut rng = rng::stream(seed, &[0x5249, t as u64]);
        let base = self.base(&mut rng);
        let r = self.task_matrix(&mut rng);
        apply_task_matrix(&base, &r, format!("ring_task{t:04}"))
    }

    pub fn bundle(&self, n_train: usize, n_valid: usize, n_target: usize, seed: u64) -> TaskBundle {
        let total = n_train + n_valid + n_target;
        let tasks = (0..total).map(|t| self.task(seed, t)).collect();
        let splits = (0..total).map(|t| split_of(t, n_train, n_valid)).collect();
        TaskBundle::new(tasks, splits, seed)
    }
}

/// Per-episode instance counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub n_query_normal: usize,
    pub n_query_anomaly: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_normal: 5,
            n_anomaly: 1,
            n_query_normal: 25,
            n_query_anomaly: 5,
        }
    }
}

/// The labelled instances a task is adapted from.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    /// `N_N × M`
    pub normals: Matrix,
    /// `N_A × M`; zero rows selects normal-only adaptation.
    pub anomalies: Matrix,
}

impl SupportSet {
    pub fn new(normals: Matrix, anomalies: Matrix) -> Self {
        Self { normals, anomalies }
    }

    pub fn n_normal(&self) -> usize {
        self.normals.rows()
    }

    pub fn n_anomaly(&self) -> usize {
        self.anomalies.rows()
    }

    pub fn n_attributes(&self) -> usize {
        self.normals.cols().max(self.anomalies.cols())
    }

    pub fn len(&self) -> usize {
        self.n_normal() + self.n_anomaly()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: usize,
    pub support: SupportSet,
    pub query_normals: Matrix,
    pub query_anomalies: Matrix,
}

/// Draws support and query sets uniformly without replacement; support and
/// query never share an instance.
pub fn sample_episode<R: Rng + ?Sized>(
    task: &LabeledDataset,
    task_id: usize,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode, DataError> {
    let anomalies = task.anomaly_indices();
    let normals = task.normal_indices();
    let need_a = spec.n_anomaly + spec.n_query_anomaly;
    let need_n = spec.n_normal + spec.n_query_normal;
    if anomalies.len() < need_a {
        return Err(DataError::InsufficientInstances {
            task: task.name.clone(),
            class: "anomalous",
            available: anomalies.len(),
            required: need_a,
        });
    }
    if normals.len() < need_n {
        return Err(DataError::InsufficientInstances {
            task: task.name.clone(),
            class: "normal",
            available: normals.len(),
            required: need_n,
        });
    }
    let pick_a: Vec<usize> = sample(rng, anomalies.len(), need_a)
        .into_iter()
        .map(|i| anomalies[i])
        .collect();
    let pick_n: Vec<usize> = sample(rng, normals.len(), need_n)
        .into_iter()
        .map(|i| normals[i])
        .collect();
    Ok(Episode {
        task: task_id,
        support: SupportSet::new(
            task.gather(&pick_n[..spec.n_normal]),
            task.gather(&pick_a[..spec.n_anomaly]),
        ),
        query_normals: task.gather(&pick_n[spec.n_normal..]),
        query_anomalies: task.gather(&pick_a[spec.n_anomaly..]),
    })
}

pub const MANIFEST_VERSION: u32 = 1;

/// JSON index of per-task CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// Standardise each task file on load.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub source: Option<String>,
    pub tasks: Vec<ManifestEntry>,
}

fn default_label_column() -> String {
    "label".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory (or absolute).
    pub file: String,
    pub split: Split,
    #[serde(default)]
    pub name: Option<String>,
}

/// Writes one CSV per task plus `manifest.json` into `dir`.
pub fn write_bundle(bundle: &TaskBundle, dir: &Path, source: Option<&str>) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut entries = Vec::with_capacity(bundle.tasks.len());
    for (t, (task, split)) in bundle.tasks.iter().zip(&bundle.splits).enumerate() {
        let file = format!("task_{t:04}.csv");
        write_csv(task, &dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            split: *split,
            name: Some(task.name.clone()),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: Some(bundle.seed),
        label_column: default_label_column(),
        normalize: false,
        source: source.map(str::to_string),
        tasks: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| DataError::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::Manifest {
            path: path.to_path_buf(),
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

/// Loads every task listed in a manifest.
pub fn load_bundle(path: &Path) -> Result<TaskBundle, DataError> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut splits = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let file = base.join(&entry.file);
        let mut ds = load_csv(&file, &manifest.label_column, manifest.normalize)?;
        if let Some(name) = &entry.name {
            ds.name = name.clone();
        }
        tasks.push(ds);
        splits.push(entry.split);
    }
    if let Some(first) = tasks.first() {
        let m = first.n_attributes();
        if let Some(bad) = tasks.iter().find(|t| t.n_attributes() != m) {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                message: format!(
                    "task '{}' has {} attributes, expected {m}",
                    bad.name,
                    bad.n_attributes()
                ),
            });
        }
    }
    Ok(TaskBundle::new(tasks, splits, manifest.seed.unwrap_or(0)))
}
