use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use eigmeta::data::{self, DataError, RingFamily, Split, TaskBundle};
use eigmeta::gradcheck::{self, GradcheckConfig};
use eigmeta::model::{Mode, ModelError};
use eigmeta::objective::TieRule;
use eigmeta::train::{self, Checkpoint, EvalReport, ModelScorer, TrainConfig, TrainError, TrainOutcome};
use eigmeta::{Error, ErrorKind};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "eigmeta", version, about = "Few-shot anomaly detection with meta-learned task projections")]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a task bundle from a labelled CSV by random linear maps.
    Synth(SynthArgs),
    /// Write the synthetic ring task family as a bundle.
    Ring(RingArgs),
    /// Meta-train on a bundle's training tasks.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a bundle.
    Eval(EvalArgs),
    /// Train and evaluate under an ablation mode.
    Ablate(AblateArgs),
    /// Check every gradient path against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    valid: Option<usize>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    label_column: Option<String>,
    /// Standardize attributes before synthesis.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct RingArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    valid: Option<usize>,
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    validation_interval: Option<usize>,
    #[arg(long)]
    validation_episodes: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    repr_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Leading embedding coordinates kept by the normal-only adaptation.
    #[arg(long)]
    normal_only_k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

#[derive(Args, Default)]
struct EvalFlags {
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long, value_enum)]
    ties: Option<Ties>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    mode: Ablation,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Matrix and embedding size J.
    #[arg(long, default_value_t = 6)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Ties {
    Strict,
    Half,
}

impl From<Ties> for TieRule {
    fn from(t: Ties) -> Self {
        match t {
            Ties::Strict => TieRule::Strict,
            Ties::Half => TieRule::Half,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    Full,
    Wonn,
    Woproj,
    Woanomaly,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    out: Option<PathBuf>,
    data: DataSection,
    synth: SynthSection,
    train: TrainConfig,
    eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    input: Option<PathBuf>,
    manifest: Option<PathBuf>,
    label_column: String,
    normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            input: None,
            manifest: None,
            label_column: "label".into(),
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthSection {
    train: usize,
    valid: usize,
    target: usize,
    seed: u64,
    ring: RingFamily,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train: 400,
            valid: 50,
            target: 50,
            seed: 0,
            ring: RingFamily::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    split: Split,
    episodes: usize,
    seed: u64,
    ties: Ties,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Target,
            episodes: 100,
            seed: 0,
            ties: Ties::Strict,
        }
    }
}

/// A failure tagged with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

fn kind_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

/// Exit code for an error raised while computing.
fn classify(error: anyhow::Error) -> Failure {
    let mut code = EXIT_DATA;
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            code = kind_code(e.kind());
            break;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            code = kind_code(e.kind());
            break;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            code = EXIT_DATA;
            break;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            code = kind_code(e.kind());
            break;
        }
    }
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(f) = configure_threads() {
        eprintln!("error: {:#}", f.error);
        return ExitCode::from(f.code);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("EIGMETA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(anyhow!("EIGMETA_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(e.into()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(config_error)?;
    let mut cfg: RunConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(config_error)?;
    // paths in the file are relative to the file
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.out, &mut cfg.data.input, &mut cfg.data.manifest]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, a),
        Command::Ring(a) => ring(&mut cfg, a),
        Command::Train(a) => {
            apply_train_flags(&mut cfg, &a.flags);
            if let Some(m) = a.mode {
                cfg.train.mode = m;
            }
            train_cmd(&cfg).map(|_| 0)
        }
        Command::Eval(a) => eval_cmd(&mut cfg, a),
        Command::Ablate(a) => ablate(&mut cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn require<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| config_error(anyhow!("{what} is required (flag or config file)")))
}

fn synth(cfg: &mut RunConfig, a: SynthArgs) -> Result<u8, Failure> {
    override_opt(&mut cfg.data.input, a.input);
    override_opt(&mut cfg.out, a.out);
    override_val(&mut cfg.synth.seed, a.seed);
    override_val(&mut cfg.synth.train, a.train);
    override_val(&mut cfg.synth.valid, a.valid);
    override_val(&mut cfg.synth.target, a.target);
    override_val(&mut cfg.data.label_column, a.label_column);
    cfg.data.normalize |= a.normalize;
    let input = require(&cfg.data.input, "--input")?.clone();
    let out = require(&cfg.out, "--out")?.clone();

    let base = data::load_csv(&input, &cfg.data.label_column, cfg.data.normalize).map_err(|e| classify(e.into()))?;
    let s = &cfg.synth;
    let bundle = data::synthesize_tasks(&base, s.train, s.valid, s.target, s.seed);
    write_bundle(&bundle, &out, &input.display().to_string())
}

fn ring(cfg: &mut RunConfig, a: RingArgs) -> Result<u8, Failure> {
    override_opt(&mut cfg.out, a.out);
    override_val(&mut cfg.synth.seed, a.seed);
    override_val(&mut cfg.synth.train, a.train);
    override_val(&mut cfg.synth.valid, a.valid);
    override_val(&mut cfg.synth.target, a.target);
    let out = require(&cfg.out, "--out")?.clone();
    let s = &cfg.synth;
    let bundle = s.ring.bundle(s.train, s.valid, s.target, s.seed);
    write_bundle(&bundle, &out, "ring")
}

fn write_bundle(bundle: &TaskBundle, out: &Path, source: &str) -> Result<u8, Failure> {
    let manifest = data::write_bundle(bundle, out, Some(source)).map_err(|e| classify(e.into()))?;
    println!("wrote {} tasks and {}", bundle.tasks.len(), manifest.display());
    Ok(0)
}

fn override_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn override_val<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    override_opt(&mut cfg.data.manifest, f.manifest.clone());
    override_opt(&mut cfg.out, f.out.clone());
    let t = &mut cfg.train;
    override_val(&mut t.seed, f.seed);
    override_val(&mut t.max_updates, f.max_updates);
    override_val(&mut t.learning_rate, f.learning_rate);
    override_val(&mut t.dropout, f.dropout);
    override_val(&mut t.validation_interval, f.validation_interval);
    override_val(&mut t.validation_episodes, f.validation_episodes);
    override_val(&mut t.patience, f.patience);
    override_val(&mut t.network.hidden, f.hidden);
    override_val(&mut t.network.repr_dim, f.repr_dim);
    override_val(&mut t.network.embed_dim, f.embed_dim);
    override_val(&mut t.normal_only.k, f.normal_only_k);
}

fn apply_eval_flags(cfg: &mut RunConfig, f: &EvalFlags) {
    override_val(&mut cfg.eval.split, f.split);
    override_val(&mut cfg.eval.episodes, f.episodes);
    override_val(&mut cfg.eval.seed, f.eval_seed);
    override_val(&mut cfg.eval.ties, f.ties);
}

fn load_bundle(cfg: &RunConfig) -> Result<TaskBundle, Failure> {
    let manifest = require(&cfg.data.manifest, "--manifest")?;
    data::load_bundle(manifest)
        .with_context(|| format!("loading bundle {}", manifest.display()))
        .map_err(classify)
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(classify)
}

/// `# ` lines recording the command, resolved configuration and seed.
fn provenance(command: &str, cfg: &impl Serialize, seed: u64) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("# eigmeta {command} {}\n# seed: {seed}\n# config: {json}\n", env!("CARGO_PKG_VERSION"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(classify)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn train_cmd(cfg: &RunConfig) -> Result<TrainOutcome, Failure> {
    cfg.train.validate().map_err(|e| config_error(e.into()))?;
    let out = require(&cfg.out, "--out")?.clone();
    let bundle = load_bundle(cfg)?;
    create_out(&out)?;
    let outcome = train::train(&bundle, &cfg.train).map_err(|e| classify(e.into()))?;

    let ckpt_path = out.join("checkpoint.bin");
    outcome
        .checkpoint
        .save(&ckpt_path)
        .map_err(|e| classify(e.into()))?;

    let mut curve = provenance("train", cfg, cfg.train.seed);
    curve.push_str("update,loss,validation_auc\n");
    for p in &outcome.curve {
        curve.push_str(&format!("{},{},{}\n", p.update, fmt_opt(p.loss), fmt_opt(p.validation_auc)));
    }
    write_file(&out.join("curve.csv"), &curve)?;

    let ck = &outcome.checkpoint;
    let summary = serde_json::json!({
        "command": "train",
        "seed": cfg.train.seed,
        "config": cfg,
        "best_validation_auc": ck.best_validation_auc,
        "best_update": ck.best_update,
        "updates": ck.updates,
        "skipped": ck.skipped,
        "stopped_early": outcome.stopped_early,
        "clamped_gaps": outcome.clamped_gaps,
    });
    write_file(&out.join("train.json"), &format!("{:#}\n", summary))?;
    println!(
        "best validation AUC {:.4} at update {} of {} ({} skipped); checkpoint {}",
        ck.best_validation_auc,
        ck.best_update,
        ck.updates,
        ck.skipped,
        ckpt_path.display()
    );
    Ok(outcome)
}

fn evaluate_to(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    bundle: &TaskBundle,
    out: &Path,
    command: &str,
) -> Result<EvalReport, Failure> {
    let e = &cfg.eval;
    if e.episodes == 0 {
        return Err(config_error(anyhow!("eval.episodes must be positive")));
    }
    let indices = bundle.indices(e.split);
    if indices.is_empty() {
        return Err(classify(DataError::EmptySplit(e.split).into()));
    }
    let tasks: Vec<_> = indices.iter().map(|&i| &bundle.tasks[i]).collect();
    let report = train::evaluate(
        &ModelScorer::new(checkpoint),
        &tasks,
        &checkpoint.config.episode,
        e.episodes,
        e.seed,
        e.ties.into(),
    )
    .map_err(|err| classify(err.into()))?;

    create_out(out)?;
    let mut csv = provenance(command, cfg, e.seed);
    csv.push_str("task,episode,auc\n");
    for r in &report.episodes {
        csv.push_str(&format!("{},{},{}\n", tasks[r.task].name, r.episode, fmt_opt(r.auc)));
    }
    write_file(&out.join("episodes.csv"), &csv)?;
    let summary = serde_json::json!({
        "command": command,
        "seed": e.seed,
        "config": cfg,
        "checkpoint_config": checkpoint.config,
        "split": e.split,
        "episodes": report.episodes.len(),
        "mean": report.mean,
        "std": report.std,
        "skipped": report.skipped,
    });
    write_file(&out.join("summary.json"), &format!("{:#}\n", summary))?;
    println!(
        "{} AUC {:.4} ± {:.4} over {} episodes ({} skipped)",
        e.split,
        report.mean,
        report.std,
        report.episodes.len(),
        report.skipped
    );
    Ok(report)
}

fn eval_cmd(cfg: &mut RunConfig, a: EvalArgs) -> Result<u8, Failure> {
    override_opt(&mut cfg.data.manifest, a.manifest);
    override_opt(&mut cfg.out, a.out);
    override_val(&mut cfg.eval.seed, a.seed);
    apply_eval_flags(cfg, &a.eval);
    let out = require(&cfg.out, "--out")?.clone();
    let checkpoint = Checkpoint::load(&a.checkpoint).map_err(|e| classify(e.into()))?;
    let bundle = load_bundle(cfg)?;
    if bundle.n_attributes() != checkpoint.params.arch.n_attributes {
        return Err(classify(anyhow!(DataError::Format {
            path: cfg.data.manifest.clone().unwrap_or_default(),
            message: format!(
                "bundle has {} attributes, checkpoint expects {}",
                bundle.n_attributes(),
                checkpoint.params.arch.n_attributes
            ),
        })));
    }
    evaluate_to(cfg, &checkpoint, &bundle, &out, "eval")?;
    Ok(0)
}

fn ablate(cfg: &mut RunConfig, a: AblateArgs) -> Result<u8, Failure> {
    apply_train_flags(cfg, &a.flags);
    apply_eval_flags(cfg, &a.eval);
    match a.mode {
        Ablation::Full => cfg.train.mode = Mode::Eigen,
        Ablation::Wonn => cfg.train.mode = Mode::WoNn,
        Ablation::Woproj => cfg.train.mode = Mode::WoProj,
        Ablation::Woanomaly => {
            cfg.train.mode = Mode::NormalOnly;
            cfg.train.episode.n_anomaly = 0;
        }
    }
    let outcome = train_cmd(cfg)?;
    let bundle = load_bundle(cfg)?;
    let out = require(&cfg.out, "--out")?.clone();
    evaluate_to(cfg, &outcome.checkpoint, &bundle, &out, "ablate")?;
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8, Failure> {
    if a.size < 2 || a.trials == 0 {
        return Err(config_error(anyhow!("--size must be at least 2 and --trials positive")));
    }
    let cfg = GradcheckConfig {
        seed: a.seed,
        size: a.size,
        trials: a.trials,
        instances: a.instances,
        inject_fault: a.inject_fault,
    };
    let report = gradcheck::run(&cfg);
    for c in &report.checks {
        println!(
            "{:<34} {:>10.3e}  tol {:.0e}  trials {:>3}  clamped {:>3}  kinks {:>3}  redrawn {:>2}  {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.trials,
            c.clamped_gaps,
            c.excluded,
            c.redrawn,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    if let Some(path) = &a.json {
        let json = serde_json::json!({ "seed": cfg.seed, "config": cfg, "report": report });
        write_file(path, &format!("{:#}\n", json))?;
    }
    if report.passed {
        Ok(0)
    } else {
        eprintln!("error: gradient check failed");
        Ok(EXIT_NUMERICAL)
    }
}
