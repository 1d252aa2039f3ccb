//! Subcommand implementations behind the `weakpoly` binary: dataset
//! synthesis, weak-label generation, EM runs, evaluation and budget
//! planning. Every output carries a hash of the configuration that
//! produced it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use weakpoly::budget::{cost_table_csv, plan, AnnotationPolicy, Allocation, BudgetError, DEFAULT_BUDGET_SECONDS, DEFAULT_STRONG_BASE};
use weakpoly::detector::{Candidate, DetectorError, DetectorState};
use weakpoly::em::{reports_csv, run_em, EmConfig, EmError, EmRoundReport};
use weakpoly::evaluation::{evaluate_split, Metrics, DEFAULT_IOU_THRESH};
use weakpoly::geometry::Polygon;
use weakpoly::scene::{read_dataset, split_dataset, synth_dataset, write_dataset, ImageRecord, SceneError, SynthParams};
use weakpoly::seeds::named_seed;
use weakpoly::weak_labels::{generate, AnnotationCost, WeakKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("model expects feature_dim {model}, dataset has {dataset}")]
    DimensionMismatch { model: usize, dataset: usize },
    #[error("record {0} has no polygon labels")]
    MissingTruth(String),
    #[error("dataset: {0}")]
    Scene(#[from] SceneError),
    #[error("em: {0}")]
    Em(#[from] EmError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("budget: {0}")]
    Budget(#[from] BudgetError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config { .. } => "config",
            CliError::Exists(_) => "exists",
            CliError::DimensionMismatch { .. } => "dimension_mismatch",
            CliError::MissingTruth(_) => "missing_truth",
            CliError::Scene(_) => "dataset",
            CliError::Em(_) => "em",
            CliError::Detector(_) => "detector",
            CliError::Budget(_) => "budget",
            CliError::Json(_) => "json",
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn config_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_owned(),
        message: message.into(),
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_vec(&serde_json::to_value(value).expect("serializable config")).expect("json");
    hex::encode(Sha256::digest(canonical))
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn check_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_owned()));
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| config_err(path, e.to_string()))
}

/// Paths in a config file are relative to the file's directory.
fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_owned();
    }
    config_path.parent().unwrap_or(Path::new(".")).join(p)
}

pub fn load_dataset(path: &Path) -> Result<(usize, Vec<ImageRecord>), CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(read_dataset(BufReader::new(file))?)
}

fn save_dataset(path: &Path, feature_dim: usize, records: &[ImageRecord]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, feature_dim, records)?;
    w.flush().map_err(io_err(path))
}

/// Sidecar written next to an output file: `data.json` -> `data.meta.json`.
pub fn sidecar(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.json"))
}

#[derive(Serialize)]
struct Provenance<'a, C: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    config: &'a C,
}

// ---- synth ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub output: PathBuf,
    pub scenes: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub scene: SynthParams,
}

#[derive(Serialize)]
struct SynthIdentity<'a> {
    scenes: usize,
    rng_seed: u64,
    scene: &'a SynthParams,
}

/// Generates the scenes and writes the dataset plus a `.meta.json` sidecar.
/// Returns the config hash.
pub fn cmd_synth(cfg: &SynthConfig, force: bool) -> Result<String, CliError> {
    let meta = sidecar(&cfg.output, "meta");
    check_writable(&cfg.output, force)?;
    check_writable(&meta, force)?;
    let records = synth_dataset(cfg.scenes, cfg.rng_seed, &cfg.scene)?;
    let hash = config_hash(&SynthIdentity {
        scenes: cfg.scenes,
        rng_seed: cfg.rng_seed,
        scene: &cfg.scene,
    });
    save_dataset(&cfg.output, cfg.scene.feature_dim, &records)?;
    write_json(
        &meta,
        &Provenance {
            command: "synth",
            config_hash: &hash,
            config: cfg,
        },
    )?;
    Ok(hash)
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig, CliError> {
    let mut cfg: SynthConfig = load_toml(path)?;
    cfg.output = resolve(path, &cfg.output);
    cfg.scene.validate().map_err(|e| config_err(path, e.to_string()))?;
    Ok(cfg)
}

// ---- weaken --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakenArgs {
    pub dataset: PathBuf,
    pub kind: WeakKind,
    pub rng_seed: u64,
    pub output: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub config_hash: String,
    /// Polygons per record id, as `[x, y]` vertex lists.
    pub truth: BTreeMap<String, Vec<Vec<[f64; 2]>>>,
}

/// Replaces polygon labels by weak labels of `kind`; the polygons move to
/// a `.truth.json` sidecar. Returns the config hash.
pub fn cmd_weaken(args: &WeakenArgs, force: bool) -> Result<String, CliError> {
    let truth_path = sidecar(&args.output, "truth");
    let meta = sidecar(&args.output, "meta");
    for p in [&args.output, &truth_path, &meta] {
        check_writable(p, force)?;
    }
    let (f, mut records) = load_dataset(&args.dataset)?;
    let hash = config_hash(&serde_json::json!({
        "dataset_sha256": file_digest(&args.dataset)?,
        "kind": args.kind,
        "rng_seed": args.rng_seed,
    }));
    let mut truth = BTreeMap::new();
    for (i, r) in records.iter_mut().enumerate() {
        let polys = r.strong.take().ok_or_else(|| CliError::MissingTruth(r.id.clone()))?;
        let seed = named_seed(args.rng_seed, &format!("weaken/{i}"));
        r.weak = Some(generate(args.kind, &polys, r.image.width as f64, r.image.height as f64, seed));
        truth.insert(
            r.id.clone(),
            polys.iter().map(|p| p.vertices().iter().map(|v| [v.x, v.y]).collect()).collect(),
        );
    }
    save_dataset(&args.output, f, &records)?;
    write_json(
        &truth_path,
        &TruthFile {
            config_hash: hash.clone(),
            truth,
        },
    )?;
    write_json(
        &meta,
        &Provenance {
            command: "weaken",
            config_hash: &hash,
            config: args,
        },
    )?;
    Ok(hash)
}

// ---- em ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fully labelled dataset; the run splits it into strong and weak parts.
    pub dataset: PathBuf,
    /// Evaluation dataset; the training dataset itself when absent.
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    pub weak_kind: WeakKind,
    pub strong_fraction: f64,
    pub output_dir: PathBuf,
    /// Top-level seed; the split and the EM loop derive their own streams.
    pub rng_seed: u64,
    #[serde(default)]
    pub em: EmConfig,
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = load_toml(path)?;
    cfg.dataset = resolve(path, &cfg.dataset);
    cfg.eval_dataset = cfg.eval_dataset.map(|p| resolve(path, &p));
    cfg.output_dir = resolve(path, &cfg.output_dir);
    for p in std::iter::once(&cfg.dataset).chain(&cfg.eval_dataset) {
        if !p.is_file() {
            return Err(config_err(path, format!("{} does not exist", p.display())));
        }
    }
    if !(0.0..=1.0).contains(&cfg.strong_fraction) {
        return Err(config_err(path, "strong_fraction must lie in [0, 1]"));
    }
    cfg.em.validate().map_err(|e| config_err(path, e.to_string()))?;
    Ok(cfg)
}

/// Files written by `cmd_em` inside `output_dir`.
pub const EM_OUTPUTS: [&str; 4] = ["report.csv", "report.json", "model.json", "run.json"];

#[derive(Debug, Serialize, Deserialize)]
pub struct EmReportFile {
    pub config_hash: String,
    pub weak_kind: WeakKind,
    pub rounds: Vec<EmRoundReport>,
}

/// Runs the EM experiment. The config hash covers the dataset contents and
/// every setting except the output location.
pub fn cmd_em(cfg: &ExperimentConfig, force: bool) -> Result<String, CliError> {
    for name in EM_OUTPUTS {
        check_writable(&cfg.output_dir.join(name), force)?;
    }
    let hash = config_hash(&serde_json::json!({
        "dataset_sha256": file_digest(&cfg.dataset)?,
        "eval_dataset_sha256": cfg.eval_dataset.as_deref().map(file_digest).transpose()?,
        "weak_kind": cfg.weak_kind,
        "strong_fraction": cfg.strong_fraction,
        "rng_seed": cfg.rng_seed,
        "em": cfg.em,
    }));
    let (_, records) = load_dataset(&cfg.dataset)?;
    let eval = match &cfg.eval_dataset {
        Some(p) => load_dataset(p)?.1,
        None => records.clone(),
    };
    let split = split_dataset(&records, cfg.strong_fraction, named_seed(cfg.rng_seed, "split"), cfg.weak_kind)?;
    let em = EmConfig {
        rng_seed: named_seed(cfg.rng_seed, "em"),
        ..cfg.em.clone()
    };
    let run = run_em(&split, &eval, cfg.weak_kind, &em, None)?;

    let dir = &cfg.output_dir;
    write_bytes(&dir.join("report.csv"), reports_csv(&run.reports).as_bytes())?;
    write_json(
        &dir.join("report.json"),
        &EmReportFile {
            config_hash: hash.clone(),
            weak_kind: cfg.weak_kind,
            rounds: run.reports,
        },
    )?;
    write_bytes(&dir.join("model.json"), run.state.to_json()?.as_bytes())?;
    write_json(
        &dir.join("run.json"),
        &Provenance {
            command: "em",
            config_hash: &hash,
            config: cfg,
        },
    )?;
    Ok(hash)
}

// ---- eval ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub score_floor: f64,
    pub iou: f64,
    pub output: Option<PathBuf>,
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordDetections {
    pub record_id: String,
    pub detections: Vec<Candidate>,
}

/// Evaluates a saved model; writes the metrics document (stdout when no
/// output path) and optionally every detection.
pub fn cmd_eval(args: &EvalArgs, force: bool) -> Result<MetricsFile, CliError> {
    for p in args.output.iter().chain(&args.detections) {
        check_writable(p, force)?;
    }
    if !(0.0..=1.0).contains(&args.score_floor) || !(0.0..=1.0).contains(&args.iou) {
        return Err(config_err(Path::new("<args>"), "score floor and IoU must lie in [0, 1]"));
    }
    let model_text = fs::read_to_string(&args.model).map_err(io_err(&args.model))?;
    let state = DetectorState::from_json(&model_text)?;
    let (f, records) = load_dataset(&args.dataset)?;
    if f != state.feature_dim() {
        return Err(CliError::DimensionMismatch {
            model: state.feature_dim(),
            dataset: f,
        });
    }
    let truths = records
        .iter()
        .map(|r| r.strong.as_deref().ok_or_else(|| CliError::MissingTruth(r.id.clone())))
        .collect::<Result<Vec<&[Polygon]>, _>>()?;
    let dets = records
        .iter()
        .map(|r| state.infer(&r.image, args.score_floor))
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = evaluate_split(dets.iter().map(Vec::as_slice).zip(truths), args.iou);
    let hash = config_hash(&serde_json::json!({
        "model_sha256": file_digest(&args.model)?,
        "dataset_sha256": file_digest(&args.dataset)?,
        "score_floor": args.score_floor,
        "iou": args.iou,
    }));
    if let Some(p) = &args.detections {
        let doc: Vec<RecordDetections> = records
            .iter()
            .zip(dets)
            .map(|(r, d)| RecordDetections {
                record_id: r.id.clone(),
                detections: d,
            })
            .collect();
        write_json(p, &serde_json::json!({ "config_hash": hash, "records": doc }))?;
    }
    let out = MetricsFile {
        config_hash: hash,
        metrics,
    };
    if let Some(p) = &args.output {
        write_json(p, &out)?;
    }
    Ok(out)
}

// ---- budget --------------------------------------------------------------

/// Cost overrides; missing entries keep the defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsFile {
    pub polygon: Option<f64>,
    pub tight: Option<f64>,
    pub loose: Option<f64>,
    pub coarse: Option<f64>,
    pub tag: Option<f64>,
}

impl CostsFile {
    pub fn resolve(&self) -> AnnotationCost {
        let d = AnnotationCost::default();
        AnnotationCost {
            polygon: self.polygon.unwrap_or(d.polygon),
            tight: self.tight.unwrap_or(d.tight),
            loose: self.loose.unwrap_or(d.loose),
            coarse: self.coarse.unwrap_or(d.coarse),
            tag: self.tag.unwrap_or(d.tag),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetArgs {
    pub policies: Vec<AnnotationPolicy>,
    pub budget: f64,
    pub costs: AnnotationCost,
    pub strong_base: u64,
}

impl Default for BudgetArgs {
    fn default() -> Self {
        Self {
            policies: weakpoly::budget::standard_policies(),
            budget: DEFAULT_BUDGET_SECONDS,
            costs: AnnotationCost::default(),
            strong_base: DEFAULT_STRONG_BASE,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlannedPolicy {
    pub name: String,
    pub policy: AnnotationPolicy,
    pub image_amount: String,
    pub forms: String,
    pub allocation: Allocation,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BudgetFile {
    pub config_hash: String,
    pub budget: f64,
    pub costs: AnnotationCost,
    pub plans: Vec<PlannedPolicy>,
}

pub fn cmd_budget(args: &BudgetArgs) -> Result<BudgetFile, CliError> {
    let plans = args
        .policies
        .iter()
        .map(|p| {
            let allocation = plan(p, args.budget, &args.costs, args.strong_base)?;
            let (image_amount, forms) = allocation.amount_and_forms();
            Ok(PlannedPolicy {
                name: p.name(),
                policy: *p,
                image_amount,
                forms,
                allocation,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(BudgetFile {
        config_hash: config_hash(args),
        budget: args.budget,
        costs: args.costs,
        plans,
    })
}

/// The plans as a cost table, one row per policy.
pub fn budget_csv(file: &BudgetFile) -> String {
    let rows: Vec<_> = file.plans.iter().map(|p| (p.policy, p.allocation)).collect();
    cost_table_csv(&rows)
}

pub fn load_costs(path: &Path) -> Result<AnnotationCost, CliError> {
    let c: CostsFile = load_toml(path)?;
    let costs = c.resolve();
    if !costs.is_valid() {
        return Err(config_err(path, "annotation costs must be positive"));
    }
    Ok(costs)
}

/// Writes `bytes` to a path that must not exist unless `force`.
pub fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<(), CliError> {
    check_writable(path, force)?;
    write_bytes(path, bytes)
}

/// Writes `value` as pretty JSON to `path`, or to stdout.
pub fn emit_json<T: Serialize>(path: Option<&Path>, value: &T, force: bool) -> Result<(), CliError> {
    match path {
        Some(p) => {
            check_writable(p, force)?;
            write_json(p, value)
        }
        None => {
            let text = serde_json::to_string_pretty(value)?;
            writeln!(std::io::stdout().lock(), "{text}").map_err(io_err(Path::new("<stdout>")))
        }
    }
}

/// Default truth sidecar of a weakened dataset.
pub fn truth_path(weak_dataset: &Path) -> PathBuf {
    sidecar(weak_dataset, "truth")
}

pub fn default_eval_args(model: PathBuf, dataset: PathBuf) -> EvalArgs {
    EvalArgs {
        model,
        dataset,
        score_floor: EmConfig::default().eval_score_floor,
        iou: DEFAULT_IOU_THRESH,
        output: None,
        detections: None,
    }
}
