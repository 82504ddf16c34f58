//! Episodic meta-training, evaluation on held-out tasks, and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::data::{sample_episode, DataError, Episode, EpisodeSpec, LabeledDataset, Split, TaskBundle};
use crate::model::{fix_center, Architecture, Forward, Mode, ModelError, ModelParams, NormalOnlyConfig};
use crate::objective::{empirical_auc_with, EpisodeScore, TieRule};
use crate::rng::{stream, StreamRng};
use crate::{Error, ErrorKind, Matrix};

/// Fraction of skipped training episodes above which a run fails.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

// stream tags
const INIT: u64 = 1;
const CENTER: u64 = 2;
const TRAIN: u64 = 3;
const VALIDATION: u64 = 4;
const EVALUATION: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{skipped} of {attempted} training episodes were skipped as degenerate (limit {limit:.0}%)")]
    TooManySkips {
        skipped: usize,
        attempted: usize,
        limit: f64,
    },
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: &'static str, update: usize },
    #[error("every evaluation episode was degenerate")]
    NoScoredEpisodes,
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint {path} has format version {found}, this build reads version {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
}

impl TrainError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TrainError::InvalidConfig(_) => ErrorKind::Config,
            TrainError::TooManySkips { .. } | TrainError::NonFinite { .. } | TrainError::NoScoredEpisodes => {
                ErrorKind::Numerical
            }
            TrainError::Io { .. } | TrainError::Checkpoint { .. } | TrainError::VersionMismatch { .. } => {
                ErrorKind::Data
            }
        }
    }
}

/// Hidden widths; the attribute count comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub repr_dim: usize,
    pub embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            repr_dim: 256,
            embed_dim: 256,
        }
    }
}

impl NetworkConfig {
    pub fn architecture(&self, n_attributes: usize) -> Architecture {
        Architecture {
            n_attributes,
            hidden: self.hidden,
            repr_dim: self.repr_dim,
            embed_dim: self.embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Parameter updates; one update consumes one episode.
    #[serde(alias = "max_epochs")]
    pub max_updates: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Updates between validation passes.
    pub validation_interval: usize,
    pub validation_episodes: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    /// Training episodes averaged to fix the center.
    pub center_episodes: usize,
    pub seed: u64,
    pub mode: Mode,
    pub episode: EpisodeSpec,
    pub network: NetworkConfig,
    pub normal_only: NormalOnlyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_updates: 1000,
            learning_rate: 1e-3,
            dropout: 0.1,
            validation_interval: 50,
            validation_episodes: 100,
            patience: 10,
            center_episodes: 100,
            seed: 0,
            mode: Mode::Eigen,
            episode: EpisodeSpec::default(),
            network: NetworkConfig::default(),
            normal_only: NormalOnlyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [
            ("max_updates", self.max_updates),
            ("validation_interval", self.validation_interval),
            ("validation_episodes", self.validation_episodes),
            ("patience", self.patience),
            ("center_episodes", self.center_episodes),
            ("episode.n_normal", self.episode.n_normal),
            ("episode.n_query_normal", self.episode.n_query_normal),
            ("episode.n_query_anomaly", self.episode.n_query_anomaly),
            ("network.hidden", self.network.hidden),
            ("network.repr_dim", self.network.repr_dim),
            ("network.embed_dim", self.network.embed_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let n_a = self.episode.n_anomaly;
        match self.mode {
            Mode::NormalOnly if n_a != 0 => {
                return bad(format!("normal-only mode needs episode.n_anomaly = 0, got {n_a}"));
            }
            Mode::SingleAnomaly if n_a != 1 => {
                return bad(format!("single-anomaly mode needs episode.n_anomaly = 1, got {n_a}"));
            }
            Mode::Eigen | Mode::WoNn if n_a == 0 => {
                return bad(format!("{} mode needs episode.n_anomaly >= 1", self.mode.name()));
            }
            _ => {}
        }
        if self.mode == Mode::NormalOnly {
            let k = self.normal_only.k;
            if k == 0 || k > self.network.embed_dim {
                return bad(format!(
                    "normal_only.k = {k} must lie in 1..={}",
                    self.network.embed_dim
                ));
            }
            if let Some(r) = self.normal_only.ridge {
                if !(r > 0.0 && r.is_finite()) {
                    return bad(format!("normal_only.ridge must be positive, got {r}"));
                }
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Trained parameters plus everything needed to reproduce or resume them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    /// State of the training stream when the run ended.
    pub rng: StreamRng,
    pub best_validation_auc: f64,
    pub best_update: usize,
    pub updates: usize,
    pub skipped: usize,
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub update: usize,
    /// `None` at update 0 and for skipped episodes.
    pub loss: Option<f64>,
    pub validation_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    pub stopped_early: bool,
    /// Eigen-gaps clamped during backpropagation, summed over the run.
    pub clamped_gaps: usize,
}

/// Something that scores an episode's queries after seeing its support.
pub trait Scorer: Sync {
    fn score(&self, episode: &Episode) -> Result<EpisodeScore, ModelError>;
}

/// The model under a given mode.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub mode: Mode,
    pub normal_only: NormalOnlyConfig,
}

impl<'a> ModelScorer<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Self {
        Self {
            params: &checkpoint.params,
            mode: checkpoint.config.mode,
            normal_only: checkpoint.config.normal_only,
        }
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, episode: &Episode) -> Result<EpisodeScore, ModelError> {
        self.params.score_episode(episode, self.mode, &self.normal_only)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Index into the task list handed to [`evaluate`].
    pub task: usize,
    pub episode: usize,
    /// `None` when the episode was degenerate and skipped.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    pub mean: f64,
    /// Population standard deviation over scored episodes.
    pub std: f64,
    pub skipped: usize,
}

/// Samples the episodes [`evaluate`] would use: episode `i` comes from task
/// `i mod tasks.len()` with its own seeded stream.
pub fn evaluation_episodes(
    tasks: &[&LabeledDataset],
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    tag: u64,
) -> Result<Vec<Episode>, DataError> {
    if tasks.is_empty() {
        return Ok(Vec::new());
    }
    (0..n_episodes)
        .map(|i| {
            let t = i % tasks.len();
            let mut rng = stream(seed, &[tag, i as u64]);
            sample_episode(tasks[t], t, spec, &mut rng)
        })
        .collect()
}

/// Empirical AUC of every episode, in parallel, with mean and spread.
pub fn evaluate_episodes<S: Scorer>(scorer: &S, episodes: &[Episode], ties: TieRule) -> Result<EvalReport, Error> {
    let results: Vec<Result<EpisodeResult, Error>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let auc = match scorer.score(ep) {
                Ok(scores) => Some(empirical_auc_with(&scores, ties)?),
                Err(ModelError::DegenerateAnomaly) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(EpisodeResult {
                task: ep.task,
                episode: i,
                auc,
            })
        })
        .collect();
    let episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let aucs: Vec<f64> = episodes.iter().filter_map(|e| e.auc).collect();
    if aucs.is_empty() {
        return Err(TrainError::NoScoredEpisodes.into());
    }
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    let std = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        skipped: episodes.len() - aucs.len(),
        episodes,
        mean,
        std,
    })
}

/// Samples `n_episodes` episodes from `tasks` under `seed` and scores them.
pub fn evaluate<S: Scorer>(
    scorer: &S,
    tasks: &[&LabeledDataset],
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    ties: TieRule,
) -> Result<EvalReport, Error> {
    if tasks.is_empty() {
        return Err(TrainError::InvalidConfig("no tasks to evaluate".into()).into());
    }
    let episodes = evaluation_episodes(tasks, spec, n_episodes, seed, EVALUATION)?;
    evaluate_episodes(scorer, &episodes, ties)
}

/// Fresh parameters with the center fixed, exactly as [`train`] starts.
pub fn initial_params(bundle: &TaskBundle, cfg: &TrainConfig) -> Result<ModelParams, Error> {
    cfg.validate()?;
    let train_tasks = bundle.split(Split::Train);
    if train_tasks.is_empty() {
        return Err(DataError::EmptySplit(Split::Train).into());
    }
    let arch = cfg.network.architecture(bundle.n_attributes());
    let mut params = ModelParams::init(arch, &mut stream(cfg.seed, &[INIT]));
    params.center = fix_center(
        &params,
        &train_tasks,
        &cfg.episode,
        cfg.mode,
        cfg.center_episodes,
        &mut stream(cfg.seed, &[CENTER]),
    )?;
    Ok(params)
}

/// Meta-trains on the bundle's training tasks with early stopping on the
/// mean empirical AUC of a fixed set of validation episodes.
pub fn train(bundle: &TaskBundle, cfg: &TrainConfig) -> Result<TrainOutcome, Error> {
    let mut params = initial_params(bundle, cfg)?;
    let train_tasks = bundle.split(Split::Train);
    let valid_tasks = bundle.split(Split::Validation);
    if valid_tasks.is_empty() {
        return Err(DataError::EmptySplit(Split::Validation).into());
    }
    let valid_episodes = evaluation_episodes(&valid_tasks, &cfg.episode, cfg.validation_episodes, cfg.seed, VALIDATION)?;
    let validate = |params: &ModelParams| -> Result<f64, Error> {
        let scorer = ModelScorer {
            params,
            mode: cfg.mode,
            normal_only: cfg.normal_only,
        };
        Ok(evaluate_episodes(&scorer, &valid_episodes, TieRule::Strict)?.mean)
    };

    let mut adam = Adam::new(cfg.adam(), params.trainable());
    let mut rng = stream(cfg.seed, &[TRAIN]);
    let mut best_auc = validate(&params)?;
    let mut best_params = params.clone();
    let mut best_update = 0;
    let mut curve = vec![CurvePoint {
        update: 0,
        loss: None,
        validation_auc: Some(best_auc),
    }];
    log::info!("update 0: validation AUC {best_auc:.4}");

    let mut stale = 0;
    let mut skipped = 0;
    let mut clamped_gaps = 0;
    let mut updates = 0;
    let mut stopped_early = false;
    for update in 1..=cfg.max_updates {
        updates = update;
        let t = rng.gen_range(0..train_tasks.len());
        let episode = sample_episode(train_tasks[t], t, &cfg.episode, &mut rng)?;

        let mut tape = Tape::new();
        let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
        let mut fwd = Forward::new(&mut tape, &params, dropout);
        let trainable = fwd.vars.trainable();
        let loss = match fwd.episode(&episode, cfg.mode, &cfg.normal_only) {
            Ok(out) => Some(out.loss),
            Err(ModelError::DegenerateAnomaly) => None,
            Err(e) => return Err(e.into()),
        };
        let loss_value = match loss {
            Some(loss) => {
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { what: "loss", update }.into());
                }
                let grads = tape.backward(loss)?;
                clamped_gaps += grads.clamped_gaps;
                let grads: Vec<Matrix> = trainable.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
                if !grads.iter().all(Matrix::is_finite) {
                    return Err(TrainError::NonFinite { what: "gradient", update }.into());
                }
                adam.step(&mut params.trainable_mut(), &grads)?;
                Some(value)
            }
            None => {
                skipped += 1;
                log::warn!("update {update}: degenerate episode skipped ({skipped} so far)");
                if skipped as f64 > MAX_SKIP_FRACTION * cfg.max_updates as f64 {
                    return Err(too_many_skips(skipped, update).into());
                }
                None
            }
        };

        let mut point = CurvePoint {
            update,
            loss: loss_value,
            validation_auc: None,
        };
        if update % cfg.validation_interval == 0 || update == cfg.max_updates {
            let auc = validate(&params)?;
            point.validation_auc = Some(auc);
            log::info!("update {update}: validation AUC {auc:.4} (best {best_auc:.4})");
            if auc > best_auc {
                best_auc = auc;
                best_params = params.clone();
                best_update = update;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        curve.push(point);
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if skipped as f64 > MAX_SKIP_FRACTION * updates as f64 {
        return Err(too_many_skips(skipped, updates).into());
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: best_params,
            config: cfg.clone(),
            rng,
            best_validation_auc: best_auc,
            best_update,
            updates,
            skipped,
        },
        curve,
        stopped_early,
        clamped_gaps,
    })
}

fn too_many_skips(skipped: usize, attempted: usize) -> TrainError {
    TrainError::TooManySkips {
        skipped,
        attempted,
        limit: MAX_SKIP_FRACTION * 100.0,
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EIGMETA\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// In elements from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
    config: TrainConfig,
    rng: StreamRng,
    best_validation_auc: f64,
    best_update: usize,
    updates: usize,
    skipped: usize,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Matrix)> {
        let p = &self.params;
        let mut out: Vec<(String, Matrix)> = p
            .trainable_names()
            .into_iter()
            .zip(p.trainable().into_iter().cloned())
            .collect();
        out.push(("center".into(), Matrix::row_vector(&p.center)));
        out
    }

    /// Magic, little-endian manifest length, JSON manifest, then the
    /// little-endian f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (name, m) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape: [m.rows(), m.cols()],
                offset,
            });
            offset += m.len();
            for x in m.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            architecture: self.params.arch,
            tensors: entries,
            config: self.config.clone(),
            rng: self.rng.clone(),
            best_validation_auc: self.best_validation_auc,
            best_update: self.best_update,
            updates: self.updates,
            skipped: self.skipped,
        };
        let json = serde_json::to_vec(&manifest).expect("checkpoint manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TrainError> {
        let fail = |message: &str| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(json_len))
            .ok_or_else(|| fail("truncated manifest"))?;
        let version: serde_json::Value = serde_json::from_slice(json).map_err(|e| fail(&e.to_string()))?;
        let found = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(TrainError::VersionMismatch {
                path: path.to_path_buf(),
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: CheckpointManifest = serde_json::from_value(version).map_err(|e| fail(&e.to_string()))?;
        let payload = &bytes[16 + json_len..];
        if payload.len() % 8 != 0 {
            return Err(fail("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut template = ModelParams::zeros(manifest.architecture);
        let names = template.trainable_names();
        if manifest.tensors.len() != names.len() + 1 {
            return Err(fail("tensor count does not match the architecture"));
        }
        let read = |entry: &TensorEntry| -> Result<Matrix, TrainError> {
            let [r, c] = entry.shape;
            let data = values
                .get(entry.offset..entry.offset + r * c)
                .ok_or_else(|| fail(&format!("tensor {} lies outside the payload", entry.name)))?;
            Ok(Matrix::from_vec(r, c, data.to_vec()))
        };
        for ((slot, name), entry) in template.trainable_mut().into_iter().zip(&names).zip(&manifest.tensors) {
            if &entry.name != name || [slot.rows(), slot.cols()] != entry.shape {
                return Err(fail(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            *slot = read(entry)?;
        }
        let center = manifest.tensors.last().unwrap();
        if center.name != "center" || center.shape[0] != 1 {
            return Err(fail("missing center"));
        }
        template.center = read(center)?.into_vec();

        Ok(Checkpoint {
            params: template,
            config: manifest.config,
            rng: manifest.rng,
            best_validation_auc: manifest.best_validation_auc,
            best_update: manifest.best_update,
            updates: manifest.updates,
            skipped: manifest.skipped,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RingFamily, SupportSet};
    use crate::rng::stream;
    use rand_distr::StandardNormal;

    fn tiny() -> TrainConfig {
        TrainConfig {
            max_updates: 40,
            validation_interval: 10,
            validation_episodes: 12,
            center_episodes: 10,
            network: NetworkConfig {
                hidden: 8,
                repr_dim: 6,
                embed_dim: 5,
            },
            ..TrainConfig::default()
        }
    }

    fn bundle() -> TaskBundle {
        RingFamily {
            n_normal: 40,
            n_anomaly: 8,
            ..RingFamily::default()
        }
        .bundle(4, 2, 2, 3)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let b = bundle();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny()
        };
        let out = train(&b, &cfg).unwrap();
        assert_eq!(out.checkpoint.params, initial_params(&b, &cfg).unwrap());
        let aucs: Vec<f64> = out.curve.iter().filter_map(|p| p.validation_auc).collect();
        assert_eq!(aucs.len(), 5);
        assert!(aucs.iter().all(|&a| a == aucs[0]));
        assert_eq!(out.checkpoint.best_update, 0);
        assert!(out.curve[1..].iter().all(|p| p.loss.is_some()));
    }

    #[test]
    fn runs_are_bit_identical() {
        let b = bundle();
        let one = train(&b, &tiny()).unwrap();
        let two = train(&b, &tiny()).unwrap();
        assert_eq!(one.checkpoint.to_bytes(), two.checkpoint.to_bytes());
        let other = train(&b, &TrainConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(one.checkpoint.to_bytes(), other.checkpoint.to_bytes());
    }

    #[test]
    fn best_auc_never_decreases() {
        let b = bundle();
        let out = train(&b, &TrainConfig { patience: 2, ..tiny() }).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut running = Vec::new();
        for a in out.curve.iter().filter_map(|p| p.validation_auc) {
            best = best.max(a);
            running.push(best);
        }
        assert!(running.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*running.last().unwrap(), out.checkpoint.best_validation_auc);
        if out.stopped_early {
            assert!(out.checkpoint.updates < 40);
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let out = train(&bundle(), &tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.to_bytes(), out.checkpoint.to_bytes());
    }

    #[test]
    fn checkpoint_rejects_other_versions_and_garbage() {
        let out = train(&bundle(), &TrainConfig { max_updates: 2, ..tiny() }).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + json_len]).unwrap();
        let bumped = json.replacen("\"version\":1", "\"version\":7", 1);
        assert_eq!(bumped.len(), json.len());
        let mut other = bytes[..16].to_vec();
        other.extend_from_slice(bumped.as_bytes());
        other.extend_from_slice(&bytes[16 + json_len..]);
        let p = Path::new("x.ckpt");
        assert!(matches!(
            Checkpoint::from_bytes(&other, p),
            Err(TrainError::VersionMismatch { found: 7, expected: 1, .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint", p), Err(TrainError::Checkpoint { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p),
            Err(TrainError::Checkpoint { .. })
        ));
    }

    struct Oracle;

    impl Scorer for Oracle {
        fn score(&self, ep: &Episode) -> Result<EpisodeScore, ModelError> {
            Ok(EpisodeScore::new(
                vec![1.0; ep.query_anomalies.rows()],
                vec![0.0; ep.query_normals.rows()],
            ))
        }
    }

    #[test]
    fn oracle_scorer_is_perfect_and_evaluation_is_reproducible() {
        let b = bundle();
        let target = b.split(Split::Target);
        let spec = EpisodeSpec::default();
        let r = evaluate(&Oracle, &target, &spec, 30, 5, TieRule::Strict).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.episodes.len(), 30);
        assert_eq!(r.episodes[3].task, 1);

        let params = initial_params(&b, &tiny()).unwrap();
        let scorer = ModelScorer {
            params: &params,
            mode: Mode::Eigen,
            normal_only: NormalOnlyConfig::default(),
        };
        let one = evaluate(&scorer, &target, &spec, 30, 5, TieRule::Strict).unwrap();
        let two = evaluate(&scorer, &target, &spec, 30, 5, TieRule::Strict).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn untrained_model_is_at_chance_when_classes_coincide() {
        // anomalies drawn from the same distribution as normals
        let tasks: Vec<LabeledDataset> = (0..5)
            .map(|t| {
                let mut rng = stream(70, &[t]);
                let x = Matrix::from_vec(120, 3, (0..360).map(|_| rng.sample(StandardNormal)).collect());
                let labels = (0..120).map(|i| u8::from(i % 4 == 0)).collect();
                LabeledDataset::new(format!("t{t}"), x, labels)
            })
            .collect();
        let splits = vec![Split::Train, Split::Train, Split::Validation, Split::Target, Split::Target];
        let b = TaskBundle::new(tasks, splits, 0);
        let cfg = TrainConfig {
            network: NetworkConfig {
                hidden: 32,
                repr_dim: 16,
                embed_dim: 8,
            },
            ..tiny()
        };
        let params = initial_params(&b, &cfg).unwrap();
        let scorer = ModelScorer {
            params: &params,
            mode: Mode::Eigen,
            normal_only: NormalOnlyConfig::default(),
        };
        let r = evaluate(&scorer, &b.split(Split::Target), &cfg.episode, 200, 11, TieRule::Strict).unwrap();
        assert!((r.mean - 0.5).abs() <= 0.1, "null AUC {}", r.mean);
    }

    #[test]
    fn degenerate_episodes_are_counted_and_fail_the_run() {
        // every instance sits at the origin: anomalous scatter vanishes
        let task = LabeledDataset::new("flat", Matrix::zeros(60, 2), (0..60).map(|i| u8::from(i < 10)).collect());
        let b = TaskBundle::new(vec![task.clone(), task], vec![Split::Train, Split::Validation], 0);
        let cfg = TrainConfig {
            mode: Mode::WoNn,
            ..tiny()
        };
        let params = initial_params(&b, &cfg).unwrap();
        let ep = sample_episode(&b.tasks[0], 0, &cfg.episode, &mut stream(0, &[])).unwrap();
        assert!(matches!(
            params.score_episode(&ep, Mode::WoNn, &cfg.normal_only),
            Err(ModelError::DegenerateAnomaly)
        ));
        let err = evaluate(
            &ModelScorer {
                params: &params,
                mode: Mode::WoNn,
                normal_only: cfg.normal_only,
            },
            &b.split(Split::Train),
            &cfg.episode,
            5,
            0,
            TieRule::Strict,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Train(TrainError::NoScoredEpisodes)));
        assert!(matches!(train(&b, &cfg).unwrap_err(), Error::Train(TrainError::NoScoredEpisodes)));
        let _ = SupportSet::new(Matrix::zeros(0, 2), Matrix::zeros(0, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { max_updates: 0, ..tiny() },
            TrainConfig { dropout: 1.0, ..tiny() },
            TrainConfig { learning_rate: -1.0, ..tiny() },
            TrainConfig { mode: Mode::NormalOnly, ..tiny() },
            TrainConfig {
                mode: Mode::SingleAnomaly,
                episode: EpisodeSpec { n_anomaly: 2, ..EpisodeSpec::default() },
                ..tiny()
            },
            TrainConfig {
                episode: EpisodeSpec { n_anomaly: 0, ..EpisodeSpec::default() },
                ..tiny()
            },
            TrainConfig {
                mode: Mode::NormalOnly,
                episode: EpisodeSpec { n_anomaly: 0, ..EpisodeSpec::default() },
                normal_only: NormalOnlyConfig { k: 6, ridge: None },
                ..tiny()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))), "{cfg:?}");
        }
        let ok = TrainConfig {
            mode: Mode::NormalOnly,
            episode: EpisodeSpec { n_anomaly: 0, ..EpisodeSpec::default() },
            normal_only: NormalOnlyConfig { k: 5, ridge: None },
            ..tiny()
        };
        assert!(ok.validate().is_ok());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"max_epochs": 5}"#).unwrap().max_updates == 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 5}"#).is_err());
    }

    #[test]
    fn every_mode_trains() {
        let b = bundle();
        for (mode, n_a) in [
            (Mode::Eigen, 1),
            (Mode::SingleAnomaly, 1),
            (Mode::NormalOnly, 0),
            (Mode::WoNn, 2),
            (Mode::WoProj, 1),
        ] {
            let cfg = TrainConfig {
                mode,
                max_updates: 15,
                episode: EpisodeSpec { n_anomaly: n_a, ..EpisodeSpec::default() },
                normal_only: NormalOnlyConfig { k: 3, ridge: None },
                ..tiny()
            };
            let out = train(&b, &cfg).unwrap();
            assert!(out.checkpoint.params.is_finite());
            let expected_center = if mode == Mode::WoNn { 2 } else { 5 };
            assert_eq!(out.checkpoint.params.center.len(), expected_center);
            let r = evaluate(&ModelScorer::new(&out.checkpoint), &b.split(Split::Target), &cfg.episode, 8, 1, TieRule::Strict)
                .unwrap();
            assert!((0.0..=1.0).contains(&r.mean));
        }
    }
}
