//! The `rainsar` command line: `synth`, `collocate`, `build-dataset`,
//! `train`, `evaluate`, and `infer`.
//!
//! Every subcommand reads an optional JSON config file (`--config`) whose
//! fields individual flags override, and writes a resolved-config snapshot —
//! tool version, subcommand, and the merged config — beside its outputs, so
//! any artifact can be traced back to the exact invocation that made it.
//!
//! Exit codes are stable for scripting: 0 success, 2 validation error (bad
//! request: flags, config files, parameter combinations), 3 data error
//! (missing, malformed, or insufficient inputs), 4 numeric error (non-finite
//! values during compute). Usage errors from argument parsing also exit 2.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{load_raster, save_raster, ContainerError};
use crate::dataset::{
    build_manifest, channels, DatasetConfig, DatasetError, DatasetManifest, PatchRecord,
    PatchStore, Subset,
};
use crate::evaluation::{
    build_report, ensemble_stats, evaluate_patch, EnsembleSummary, EvalError, MetricsReport,
    PatchEval, PatchIdentity, ReportConfig,
};
use crate::geo::{GeoError, GeoRaster};
use crate::ingest::{load_polar_scan, project_polar, temporal_match, IngestError, PolarScan};
use crate::model::{
    load_checkpoint, Discriminator, LoadedCheckpoint, Model, ModelConfig, ModelError,
};
use crate::synthetic::{manifest_from_scenes, synth_scene_set, SceneParams, SynthError};
use crate::tensor::optim::OptimError;
use crate::tensor::{Graph, Real, Tensor, TensorError};
use crate::training::{
    assemble_batch, train, DropInput, LossWeights, TrainOptions, TrainSchedule, TrainingError,
};

/// Rain-probability channel written by `infer`.
pub const SEG_CHANNEL: &str = "y_seg";
/// Rain-rate channel written by `infer` (mm/h).
pub const RR_CHANNEL: &str = "y_rr";

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A subcommand failure carrying the message to print and the process exit
/// code it maps to.
#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError {
            exit_code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            exit_code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            exit_code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

// Classification of module errors: anything wrong with the request is a
// validation error, anything wrong with bytes on disk (or data that cannot
// satisfy a pipeline precondition) is a data error, and non-finite values
// produced while computing are numeric errors.

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<GeoError> for CliError {
    fn from(e: GeoError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match &e {
            SynthError::BadParams(_) => CliError::validation(e.to_string()),
            SynthError::Dataset(_) => CliError::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::BadConfig { .. }
            | ModelError::ShapeMismatch { .. }
            | ModelError::Tensor(_) => CliError::validation(e.to_string()),
            ModelError::NonFiniteInput { .. } => CliError::numeric(e.to_string()),
            ModelError::Container(_) | ModelError::Checkpoint { .. } => {
                CliError::data(e.to_string())
            }
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        match &e {
            OptimError::NonFiniteGradient { .. } => CliError::numeric(e.to_string()),
            OptimError::ShapeMismatch { .. } => CliError::validation(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFiniteLoss { .. } => CliError::numeric(e.to_string()),
            TrainingError::BadSetup { .. } => CliError::validation(e.to_string()),
            TrainingError::EmptyClass { .. }
            | TrainingError::MixedPatchSizes { .. }
            | TrainingError::Io { .. } => CliError::data(e.to_string()),
            TrainingError::Dataset(inner) => inner.into(),
            TrainingError::Model(inner) => inner.into(),
            TrainingError::Tensor(inner) => inner.into(),
            TrainingError::Optim(inner) => inner.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::BadBins(_) | EvalError::LengthMismatch { .. } => {
                CliError::validation(e.to_string())
            }
            EvalError::ShapeMismatch(_)
            | EvalError::NoOcean
            | EvalError::EmptyInput(_)
            | EvalError::DegenerateInput(_)
            | EvalError::WindOutOfRange { .. }
            | EvalError::Io { .. } => CliError::data(e.to_string()),
        }
    }
}

// ---- argument surface ----

#[derive(Debug, Parser)]
#[command(
    name = "rainsar",
    version,
    about = "SAR rainfall estimation: collocation, datasets, training, evaluation, inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic collocated scenes plus a ready-to-train manifest.
    Synth(SynthArgs),
    /// Match SAR rasters with ground-radar scans and project rain onto them.
    Collocate(CollocateArgs),
    /// Extract, label, cap, and partition patches from collocated rasters.
    BuildDataset(BuildDatasetArgs),
    /// Train the three-headed estimator on a dataset manifest.
    Train(TrainArgs),
    /// Score checkpoints on a manifest subset and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Run a checkpoint over a full scene with overlap-blended tiling.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving scene containers and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of scenes to generate.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Base seed; scene i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CollocateArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of SAR raster containers (*.bin).
    #[arg(long)]
    pub sar_dir: Option<PathBuf>,
    /// Directory of polar-scan containers (*.bin).
    #[arg(long)]
    pub radar_dir: Option<PathBuf>,
    /// Directory receiving collocated rasters and the skip log.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Maximum |SAR time − scan time| for a match, seconds.
    #[arg(long)]
    pub window_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of collocated raster containers.
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    /// Path the manifest JSON is written to.
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    /// Capping/partition seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rainless cap as a fraction of the largest wind bin.
    #[arg(long)]
    pub cap: Option<f64>,
    /// Wind histogram bin width, m/s.
    #[arg(long)]
    pub bin: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (from build-dataset or synth).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory the manifest's raster sources are relative to.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory receiving checkpoint, log, and report.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Loss weights "a,b,c,d,e" for rr, seg, max, mean, adversarial.
    #[arg(long)]
    pub loss_weights: Option<LossWeights>,
    /// Zero an input at batch assembly (repeatable; replaces the config
    /// list): vv|vh|mask|nesz|inc|wspd.
    #[arg(long = "drop-input")]
    pub drop_input: Vec<DropInput>,
    /// Sampler/schedule seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model/discriminator initialization seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Train in double precision (bitwise-reproducible logs).
    #[arg(long = "f64")]
    pub use_f64: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory the manifest's raster sources are relative to.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory receiving report.json, patches.json, and CSV tables.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to score (repeatable; two or more add ensemble spread).
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Manifest subset to score: train|val|test.
    #[arg(long)]
    pub subset: Option<String>,
    /// Zero an input at batch assembly, matching an input-ablated training
    /// run (repeatable; replaces the config list).
    #[arg(long = "drop-input")]
    pub drop_input: Vec<DropInput>,
    /// Evaluate in double precision.
    #[arg(long = "f64")]
    pub use_f64: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input raster container (a collocated or synthetic scene).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output raster container path.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Tile size in pixels; must be a multiple of the model stride.
    #[arg(long)]
    pub patch_px: Option<usize>,
    /// Blend overlapping tiles with a cosine window instead of uniformly.
    #[arg(long)]
    pub cosine: bool,
    /// Infer in double precision.
    #[arg(long = "f64")]
    pub use_f64: bool,
}

// ---- per-subcommand configs (the JSON file surface) ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub out_dir: Option<PathBuf>,
    pub scenes: usize,
    pub params: SceneParams,
    pub dataset: DatasetConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            out_dir: None,
            scenes: 12,
            params: SceneParams::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollocateConfig {
    pub sar_dir: Option<PathBuf>,
    pub radar_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub window_s: f64,
}

impl Default for CollocateConfig {
    fn default() -> Self {
        CollocateConfig {
            sar_dir: None,
            radar_dir: None,
            out_dir: None,
            window_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildDatasetConfig {
    pub input_dir: Option<PathBuf>,
    pub manifest_out: Option<PathBuf>,
    pub dataset: DatasetConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub options: TrainOptions,
    pub model_seed: u64,
    pub use_f64: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: None,
            data_dir: None,
            out_dir: None,
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            options: TrainOptions::default(),
            model_seed: 0,
            use_f64: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub manifest: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub subset: String,
    /// Patches per forward pass.
    pub chunk_size: usize,
    pub drop_inputs: Vec<DropInput>,
    pub report: ReportConfig,
    pub use_f64: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            manifest: None,
            data_dir: None,
            out_dir: None,
            checkpoints: Vec::new(),
            subset: "test".into(),
            chunk_size: 8,
            drop_inputs: Vec::new(),
            report: ReportConfig::default(),
            use_f64: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub patch_px: usize,
    pub cosine_blend: bool,
    pub use_f64: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoint: None,
            input: None,
            output: None,
            patch_px: 32,
            cosine_blend: false,
            use_f64: false,
        }
    }
}

// ---- config plumbing ----

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::validation(format!("cannot read config {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| {
        CliError::validation(format!(
            "{what} is required: set it in the config file or pass the flag"
        ))
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

/// Snapshot written beside every run's outputs.
fn write_resolved<C: Serialize>(path: &Path, subcommand: &str, config: &C) -> Result<(), CliError> {
    let doc = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&doc).expect("config serializes");
    fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn resolved_in(dir: &Path) -> PathBuf {
    dir.join("resolved_config.json")
}

/// Snapshot path for a file output: `out/manifest.json` →
/// `out/manifest.resolved_config.json`.
fn resolved_beside(file: &Path) -> PathBuf {
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    file.with_file_name(format!("{stem}.resolved_config.json"))
}

/// Container files in a directory, sorted by name for deterministic order.
fn bin_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry
            .map_err(|e| CliError::data(format!("cannot read directory {}: {e}", dir.display())))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "bin") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn parse_subset(s: &str) -> Result<Subset, CliError> {
    match s {
        "train" => Ok(Subset::Train),
        "val" => Ok(Subset::Val),
        "test" => Ok(Subset::Test),
        other => Err(CliError::validation(format!(
            "unknown subset '{other}' (expected train|val|test)"
        ))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

// ---- entry points ----

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Collocate(args) => cmd_collocate(args),
        Command::BuildDataset(args) => cmd_build_dataset(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Infer(args) => cmd_infer(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code
        }
    }
}

// ---- synth ----

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = load_config(args.config.as_deref())?;
    if let Some(d) = args.out_dir {
        cfg.out_dir = Some(d);
    }
    if let Some(n) = args.scenes {
        cfg.scenes = n;
    }
    if let Some(s) = args.seed {
        cfg.params.seed = s;
    }
    let out_dir = require(cfg.out_dir.clone(), "--out-dir")?;
    cfg.params.validate()?;
    create_dir(&out_dir)?;
    write_resolved(&resolved_in(&out_dir), "synth", &cfg)?;

    let scenes = synth_scene_set(&cfg.params, cfg.scenes)?;
    for (source, scene) in &scenes {
        save_raster(&out_dir.join(source), &scene.raster)?;
    }
    let manifest = manifest_from_scenes(&scenes, &cfg.dataset)?;
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let count = |s: Subset| manifest.subset_records(s).len();
    println!(
        "wrote {} scene containers and {} ({} patches: train {}, val {}, test {})",
        scenes.len(),
        manifest_path.display(),
        manifest.records.len(),
        count(Subset::Train),
        count(Subset::Val),
        count(Subset::Test),
    );
    Ok(())
}

// ---- collocate ----

fn cmd_collocate(args: CollocateArgs) -> Result<(), CliError> {
    let mut cfg: CollocateConfig = load_config(args.config.as_deref())?;
    if let Some(d) = args.sar_dir {
        cfg.sar_dir = Some(d);
    }
    if let Some(d) = args.radar_dir {
        cfg.radar_dir = Some(d);
    }
    if let Some(d) = args.out_dir {
        cfg.out_dir = Some(d);
    }
    if let Some(w) = args.window_s {
        cfg.window_s = w;
    }
    let sar_dir = require(cfg.sar_dir.clone(), "--sar-dir")?;
    let radar_dir = require(cfg.radar_dir.clone(), "--radar-dir")?;
    let out_dir = require(cfg.out_dir.clone(), "--out-dir")?;
    if !(cfg.window_s.is_finite() && cfg.window_s >= 0.0) {
        return Err(CliError::validation(format!(
            "--window-s must be a non-negative number, got {}",
            cfg.window_s
        )));
    }
    create_dir(&out_dir)?;
    write_resolved(&resolved_in(&out_dir), "collocate", &cfg)?;

    let mut scans: Vec<PolarScan> = Vec::new();
    for path in bin_files(&radar_dir)? {
        scans.push(load_polar_scan(&path)?);
    }
    // Time-sorted so temporal ties resolve toward the earlier scan.
    scans.sort_by_key(|s| s.timestamp);

    let mut skipped: Vec<(String, String)> = Vec::new();
    let mut written = 0usize;
    for path in bin_files(&sar_dir)? {
        let name = file_name(&path);
        let mut raster = load_raster(&path)?;
        match temporal_match(raster.timestamp, &scans, cfg.window_s) {
            Ok(scan) => {
                let rain = project_polar(scan, &raster)?;
                raster.add_channel(channels::RAIN, rain)?;
                raster.set_station(scan.station_lat, scan.station_lon, &scan.station_id);
                save_raster(&out_dir.join(&name), &raster)?;
                written += 1;
            }
            Err(e @ (IngestError::NoScanInWindow { .. } | IngestError::EmptyScanList)) => {
                skipped.push((name, e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }

    // The skip log is written even when empty: its existence marks a
    // completed pass over the inputs.
    let log_path = out_dir.join("skipped.txt");
    let mut log = String::new();
    for (name, reason) in &skipped {
        log.push_str(&format!("{name}\t{reason}\n"));
    }
    fs::write(&log_path, log)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", log_path.display())))?;

    println!(
        "collocated {written} raster(s), skipped {} (see {})",
        skipped.len(),
        log_path.display()
    );
    Ok(())
}

// ---- build-dataset ----

fn cmd_build_dataset(args: BuildDatasetArgs) -> Result<(), CliError> {
    let mut cfg: BuildDatasetConfig = load_config(args.config.as_deref())?;
    if let Some(d) = args.input_dir {
        cfg.input_dir = Some(d);
    }
    if let Some(p) = args.manifest_out {
        cfg.manifest_out = Some(p);
    }
    if let Some(s) = args.seed {
        cfg.dataset.seed = s;
    }
    if let Some(c) = args.cap {
        cfg.dataset.cap_fraction = c;
    }
    if let Some(b) = args.bin {
        cfg.dataset.bin_width_ms = b;
    }
    let input_dir = require(cfg.input_dir.clone(), "--input-dir")?;
    let manifest_out = require(cfg.manifest_out.clone(), "--manifest-out")?;
    if !(cfg.dataset.cap_fraction.is_finite() && cfg.dataset.cap_fraction >= 0.0) {
        return Err(CliError::validation(format!(
            "--cap must be a non-negative fraction, got {}",
            cfg.dataset.cap_fraction
        )));
    }
    if !(cfg.dataset.bin_width_ms.is_finite() && cfg.dataset.bin_width_ms > 0.0) {
        return Err(CliError::validation(format!(
            "--bin must be a positive width, got {}",
            cfg.dataset.bin_width_ms
        )));
    }
    if let Some(parent) = manifest_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_resolved(&resolved_beside(&manifest_out), "build-dataset", &cfg)?;

    let files = bin_files(&input_dir)?;
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no raster containers (*.bin) in {}",
            input_dir.display()
        )));
    }
    let mut rasters: Vec<(String, GeoRaster)> = Vec::with_capacity(files.len());
    for path in &files {
        rasters.push((file_name(path), load_raster(path)?));
    }
    let refs: Vec<(String, &GeoRaster)> =
        rasters.iter().map(|(n, r)| (n.clone(), r)).collect();
    let manifest = build_manifest(&refs, &cfg.dataset)?;
    manifest.save(&manifest_out)?;

    let count = |s: Subset| manifest.subset_records(s).len();
    println!(
        "wrote {} ({} patches from {} rasters: train {}, val {}, test {})",
        manifest_out.display(),
        manifest.records.len(),
        rasters.len(),
        count(Subset::Train),
        count(Subset::Val),
        count(Subset::Test),
    );
    Ok(())
}

// ---- train ----

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    if let Some(p) = args.manifest {
        cfg.manifest = Some(p);
    }
    if let Some(p) = args.data_dir {
        cfg.data_dir = Some(p);
    }
    if let Some(p) = args.out_dir {
        cfg.out_dir = Some(p);
    }
    if let Some(w) = args.loss_weights {
        cfg.options.weights = w;
    }
    if !args.drop_input.is_empty() {
        cfg.options.drop_inputs = args.drop_input;
    }
    if let Some(s) = args.seed {
        cfg.schedule.seed = s;
    }
    if let Some(s) = args.model_seed {
        cfg.model_seed = s;
    }
    if args.use_f64 {
        cfg.use_f64 = true;
    }
    let manifest_path = require(cfg.manifest.clone(), "--manifest")?;
    let data_dir = require(cfg.data_dir.clone(), "--data-dir")?;
    let out_dir = require(cfg.out_dir.clone(), "--out-dir")?;

    let manifest = DatasetManifest::load(&manifest_path)?;
    create_dir(&out_dir)?;
    write_resolved(&resolved_in(&out_dir), "train", &cfg)?;

    let report = if cfg.use_f64 {
        run_train::<f64>(&manifest, &data_dir, &cfg, &out_dir)?
    } else {
        run_train::<f32>(&manifest, &data_dir, &cfg, &out_dir)?
    };

    let summary = serde_json::json!({
        "validations": report.validations.len(),
        "best_validation": report.best_validation,
        "best_val_total": report.best_val_total,
        "checkpoint": report.checkpoint_path,
        "log": report.log_path,
        "notes": report.notes,
    });
    let summary_path = out_dir.join("train_report.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::data(format!("cannot write {}: {e}", summary_path.display())))?;

    for note in &report.notes {
        println!("note: {note}");
    }
    println!(
        "trained {} validation(s); best total {:.6} at validation {}; checkpoint {}",
        report.validations.len(),
        report.best_val_total,
        report.best_validation,
        report.checkpoint_path.display()
    );
    Ok(())
}

fn run_train<T: Real>(
    manifest: &DatasetManifest,
    data_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<crate::training::TrainReport, CliError> {
    let mut store = PatchStore::new(data_dir);
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.model_seed)?;
    // The discriminator draws from its own stream so model and adversary
    // never share initial weights.
    let mut disc = Discriminator::<T>::new(&cfg.model, cfg.model_seed.wrapping_add(1))?;
    Ok(train(
        manifest,
        &mut store,
        &mut model,
        &mut disc,
        &cfg.schedule,
        &cfg.options,
        out_dir,
    )?)
}

// ---- evaluate ----

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let mut cfg: EvaluateConfig = load_config(args.config.as_deref())?;
    if let Some(p) = args.manifest {
        cfg.manifest = Some(p);
    }
    if let Some(p) = args.data_dir {
        cfg.data_dir = Some(p);
    }
    if let Some(p) = args.out_dir {
        cfg.out_dir = Some(p);
    }
    if !args.checkpoints.is_empty() {
        cfg.checkpoints = args.checkpoints;
    }
    if let Some(s) = args.subset {
        cfg.subset = s;
    }
    if !args.drop_input.is_empty() {
        cfg.drop_inputs = args.drop_input;
    }
    if args.use_f64 {
        cfg.use_f64 = true;
    }
    let manifest_path = require(cfg.manifest.clone(), "--manifest")?;
    let data_dir = require(cfg.data_dir.clone(), "--data-dir")?;
    let out_dir = require(cfg.out_dir.clone(), "--out-dir")?;
    if cfg.checkpoints.is_empty() {
        return Err(CliError::validation(
            "at least one --checkpoint is required",
        ));
    }
    let subset = parse_subset(&cfg.subset)?;

    let manifest = DatasetManifest::load(&manifest_path)?;
    let records = manifest.subset_records(subset);
    if records.is_empty() {
        return Err(CliError::data(format!(
            "subset '{}' has no records in {}",
            cfg.subset,
            manifest_path.display()
        )));
    }
    let mut store = PatchStore::new(&data_dir);
    create_dir(&out_dir)?;
    write_resolved(&resolved_in(&out_dir), "evaluate", &cfg)?;

    // One prediction map per record per checkpoint, in record order.
    let mut runs: Vec<Vec<Array2<f32>>> = Vec::with_capacity(cfg.checkpoints.len());
    for ckpt in &cfg.checkpoints {
        let maps = if cfg.use_f64 {
            forward_subset::<f64>(ckpt, &records, &mut store, &cfg)?
        } else {
            forward_subset::<f32>(ckpt, &records, &mut store, &cfg)?
        };
        runs.push(maps);
    }

    let mut patches: Vec<PatchEval> = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let station_id = store
            .source_metadata(&rec.source)?
            .get("station_id")
            .cloned();
        let data = store.patch(rec)?;
        let identity = PatchIdentity {
            iw_id: rec.iw_id.clone(),
            wind_prior_ms: rec.wind_prior_ms,
            center_lat: rec.center_lat,
            center_lon: rec.center_lon,
            station_id,
        };
        patches.push(evaluate_patch(
            &data.rain,
            &runs[0][i],
            &data.land_mask,
            identity,
            &cfg.report.thresholds,
            cfg.report.rain_threshold,
            cfg.report.area_fraction,
        )?);
    }

    let mut report: MetricsReport = build_report(&patches, &cfg.report)?;
    if runs.len() >= 2 {
        report.ensemble = Some(summarize_ensemble(&runs)?);
    }
    report.save_json(&out_dir.join("report.json"))?;
    report.save_csv_tables(&out_dir)?;
    let patches_path = out_dir.join("patches.json");
    fs::write(
        &patches_path,
        serde_json::to_string_pretty(&patches).expect("patch records serialize"),
    )
    .map_err(|e| CliError::data(format!("cannot write {}: {e}", patches_path.display())))?;

    println!(
        "evaluated {} patches from subset {}",
        patches.len(),
        cfg.subset
    );
    println!(
        "F1 {} (CI {}..{}), precision {}, recall {}",
        fmt_opt(report.global.prf.f1),
        fmt_opt(report.global.f1_ci.map(|ci| ci.0)),
        fmt_opt(report.global.f1_ci.map(|ci| ci.1)),
        fmt_opt(report.global.prf.precision),
        fmt_opt(report.global.prf.recall),
    );
    if let Some(s) = &report.global.max_scatter {
        println!(
            "max-rain scatter: PCC {:.4}, RMSE {:.4} mm/h, slope {:.4}",
            s.pcc, s.rmse_mmh, s.slope
        );
    }
    if let Some(e) = &report.ensemble {
        println!(
            "ensemble of {} runs: mean relative std {:.4}, absent fraction {:.4}",
            e.runs, e.mean_relative_std, e.absent_fraction
        );
    }
    println!("report: {}", out_dir.join("report.json").display());
    Ok(())
}

fn forward_subset<T: Real>(
    ckpt: &Path,
    records: &[&PatchRecord],
    store: &mut PatchStore,
    cfg: &EvaluateConfig,
) -> Result<Vec<Array2<f32>>, CliError> {
    let loaded = load_checkpoint(ckpt)?;
    let model: Model<T> = loaded.build_model()?;
    let mut maps = Vec::with_capacity(records.len());
    for chunk in records.chunks(cfg.chunk_size.max(1)) {
        let batch = assemble_batch::<T>(chunk, store, &cfg.drop_inputs)?;
        let mut g: Graph<T> = Graph::new();
        let bound = model.bind(&mut g, false);
        let out = bound.forward(&mut g, &batch.x_im, &batch.x_sc)?;
        let y_rr = g.value(out.y_rr);
        let size = chunk[0].size_px;
        for i in 0..chunk.len() {
            maps.push(plane_to_array(y_rr, i, size));
        }
    }
    Ok(maps)
}

/// Extract sample `i` of an [N, 1, H, W] tensor as an H×W f32 array.
fn plane_to_array<T: Real>(t: &Tensor<T>, sample: usize, size: usize) -> Array2<f32> {
    let plane = size * size;
    let data = t.data();
    Array2::from_shape_fn((size, size), |(r, c)| {
        data[sample * plane + r * size + c].to_f64_lossy() as f32
    })
}

/// Scene-free ensemble spread, averaged over all patches and pixels.
fn summarize_ensemble(runs: &[Vec<Array2<f32>>]) -> Result<EnsembleSummary, CliError> {
    let n_patches = runs[0].len();
    let mut rel_sum = 0.0f64;
    let mut rel_n = 0usize;
    let mut absent = 0usize;
    let mut total = 0usize;
    for p in 0..n_patches {
        let maps: Vec<Array2<f32>> = runs.iter().map(|r| r[p].clone()).collect();
        let stats = ensemble_stats(&maps)?;
        for v in stats.relative.iter() {
            if !v.is_nan() {
                rel_sum += *v;
                rel_n += 1;
            }
        }
        absent += stats.absent_pixels;
        total += stats.relative.len();
    }
    Ok(EnsembleSummary {
        runs: runs.len(),
        mean_relative_std: if rel_n > 0 { rel_sum / rel_n as f64 } else { 0.0 },
        absent_fraction: if total > 0 {
            absent as f64 / total as f64
        } else {
            1.0
        },
    })
}

// ---- infer ----

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let mut cfg: InferConfig = load_config(args.config.as_deref())?;
    if let Some(p) = args.checkpoint {
        cfg.checkpoint = Some(p);
    }
    if let Some(p) = args.input {
        cfg.input = Some(p);
    }
    if let Some(p) = args.output {
        cfg.output = Some(p);
    }
    if let Some(p) = args.patch_px {
        cfg.patch_px = p;
    }
    if args.cosine {
        cfg.cosine_blend = true;
    }
    if args.use_f64 {
        cfg.use_f64 = true;
    }
    let ckpt_path = require(cfg.checkpoint.clone(), "--checkpoint")?;
    let input = require(cfg.input.clone(), "--input")?;
    let output = require(cfg.output.clone(), "--output")?;

    let raster = load_raster(&input)?;
    let loaded = load_checkpoint(&ckpt_path)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_resolved(&resolved_beside(&output), "infer", &cfg)?;

    let (seg, rr) = if cfg.use_f64 {
        infer_scene::<f64>(&loaded, &raster, cfg.patch_px, cfg.cosine_blend)?
    } else {
        infer_scene::<f32>(&loaded, &raster, cfg.patch_px, cfg.cosine_blend)?
    };

    let mut max_rr = f32::NEG_INFINITY;
    for v in rr.iter() {
        max_rr = max_rr.max(*v);
    }
    let mut out = GeoRaster::new(
        raster.rows(),
        raster.cols(),
        raster.resolution_m,
        raster.transform,
        raster.timestamp,
    );
    out.metadata = raster.metadata.clone();
    out.add_channel(SEG_CHANNEL, seg)?;
    out.add_channel(RR_CHANNEL, rr)?;
    save_raster(&output, &out)?;

    println!(
        "wrote {} ({}×{} px, peak rain {max_rr:.3} mm/h)",
        output.display(),
        out.rows(),
        out.cols()
    );
    Ok(())
}

/// Half-patch-stride tile origins covering `total` pixels; the final tile is
/// clamped flush to the end so every pixel is covered.
fn tile_offsets(total: usize, patch: usize) -> Vec<usize> {
    debug_assert!(patch >= 1 && total >= patch);
    let stride = (patch / 2).max(1);
    let mut offs = Vec::new();
    let mut at = 0usize;
    loop {
        if at + patch >= total {
            offs.push(total - patch);
            break;
        }
        offs.push(at);
        at += stride;
    }
    offs.dedup();
    offs
}

/// Per-axis blend weight at in-tile position `i`. Uniform averaging weighs
/// every pixel 1; the cosine window keeps a small floor so tile edges — the
/// only coverage some border pixels get — never weigh zero.
fn blend_weight(i: usize, patch: usize, cosine: bool) -> f64 {
    if !cosine || patch < 2 {
        return 1.0;
    }
    let t = i as f64 / (patch - 1) as f64;
    let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t).cos());
    0.05 + 0.95 * hann
}

fn infer_scene<T: Real>(
    loaded: &LoadedCheckpoint,
    raster: &GeoRaster,
    patch_px: usize,
    cosine: bool,
) -> Result<(Array2<f32>, Array2<f32>), CliError> {
    let model: Model<T> = loaded.build_model()?;
    let stride = model.config().total_stride();
    if patch_px == 0 || patch_px % stride != 0 {
        return Err(CliError::validation(format!(
            "--patch-px {patch_px} must be a positive multiple of the model stride {stride}"
        )));
    }
    let (rows, cols) = (raster.rows(), raster.cols());
    if rows < patch_px || cols < patch_px {
        return Err(CliError::validation(format!(
            "scene {rows}×{cols} px is smaller than one {patch_px} px tile"
        )));
    }
    let vv = raster.channel(channels::SSR_VV)?;
    let vh = raster.channel(channels::SSR_VH)?;
    let land = raster.channel(channels::LAND_MASK)?;
    let inc = raster.channel(channels::INCIDENCE)?;
    let nesz = raster.channel(channels::NESZ)?;
    let wind = raster.channel(channels::WIND_PRIOR)?;

    let mut seg_sum = Array2::<f64>::zeros((rows, cols));
    let mut rr_sum = Array2::<f64>::zeros((rows, cols));
    let mut w_sum = Array2::<f64>::zeros((rows, cols));
    let plane = patch_px * patch_px;

    for &r0 in &tile_offsets(rows, patch_px) {
        for &c0 in &tile_offsets(cols, patch_px) {
            let mut x_im = vec![T::zero(); 3 * plane];
            for (ci, chan) in [vv, vh, land].into_iter().enumerate() {
                for i in 0..patch_px {
                    for j in 0..patch_px {
                        x_im[(ci * patch_px + i) * patch_px + j] =
                            T::cast(f64::from(chan[[r0 + i, c0 + j]]));
                    }
                }
            }
            let window_mean = |chan: &Array2<f32>| -> f64 {
                let mut sum = 0.0f64;
                for i in 0..patch_px {
                    for j in 0..patch_px {
                        sum += f64::from(chan[[r0 + i, c0 + j]]);
                    }
                }
                sum / plane as f64
            };
            let x_sc = vec![
                T::cast(window_mean(inc)),
                T::cast(window_mean(nesz)),
                T::cast(window_mean(wind)),
            ];

            let mut g: Graph<T> = Graph::new();
            let bound = model.bind(&mut g, false);
            let out = bound.forward(
                &mut g,
                &Tensor::from_vec(&[1, 3, patch_px, patch_px], x_im),
                &Tensor::from_vec(&[1, 3], x_sc),
            )?;
            let seg = g.value(out.y_seg).data().to_vec();
            let rr = g.value(out.y_rr).data().to_vec();
            for i in 0..patch_px {
                let wi = blend_weight(i, patch_px, cosine);
                for j in 0..patch_px {
                    let w = wi * blend_weight(j, patch_px, cosine);
                    let at = i * patch_px + j;
                    seg_sum[[r0 + i, c0 + j]] += w * seg[at].to_f64_lossy();
                    rr_sum[[r0 + i, c0 + j]] += w * rr[at].to_f64_lossy();
                    w_sum[[r0 + i, c0 + j]] += w;
                }
            }
        }
    }

    let normalize = |sum: Array2<f64>| -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((rows, cols));
        ndarray::Zip::from(&mut out).and(&sum).and(&w_sum).for_each(|o, s, w| {
            *o = (s / w) as f32;
        });
        out
    };
    Ok((normalize(seg_sum), normalize(rr_sum)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_offsets_cover_every_pixel_without_overflow() {
        for (total, patch) in [(32usize, 32usize), (48, 32), (33, 32), (192, 32), (40, 8)] {
            let offs = tile_offsets(total, patch);
            assert!(offs.iter().all(|o| o + patch <= total), "{total}/{patch}");
            let mut covered = vec![false; total];
            for &o in &offs {
                for c in covered.iter_mut().skip(o).take(patch) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|c| *c), "gap for {total}/{patch}");
            let mut sorted = offs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted, offs, "offsets must be sorted and unique");
        }
    }

    #[test]
    fn single_tile_scene_has_one_offset() {
        assert_eq!(tile_offsets(32, 32), vec![0]);
    }

    #[test]
    fn uniform_blend_weighs_every_position_one() {
        for i in 0..32 {
            assert_eq!(blend_weight(i, 32, false), 1.0);
        }
    }

    #[test]
    fn cosine_blend_peaks_at_center_and_keeps_a_floor_at_edges() {
        let edge = blend_weight(0, 32, true);
        let center = blend_weight(16, 32, true);
        assert!(edge > 0.0 && edge < 0.1, "edge weight {edge}");
        assert!(center > 0.9, "center weight {center}");
        assert_eq!(blend_weight(0, 32, true), blend_weight(31, 32, true));
    }

    #[test]
    fn error_classification_maps_to_documented_exit_codes() {
        let validation: CliError = SynthError::BadParams("x".into()).into();
        assert_eq!(validation.exit_code, EXIT_VALIDATION);
        let data: CliError = DatasetError::EmptyRecords.into();
        assert_eq!(data.exit_code, EXIT_DATA);
        let numeric: CliError = TrainingError::NonFiniteLoss {
            component: "L_rr",
            step: 3,
        }
        .into();
        assert_eq!(numeric.exit_code, EXIT_NUMERIC);
        let setup: CliError = TrainingError::BadSetup {
            reason: "x".into(),
        }
        .into();
        assert_eq!(setup.exit_code, EXIT_VALIDATION);
        let ckpt: CliError = ModelError::Checkpoint {
            path: "p".into(),
            reason: "r".into(),
        }
        .into();
        assert_eq!(ckpt.exit_code, EXIT_DATA);
        let grad: CliError = OptimError::NonFiniteGradient { name: "w".into() }.into();
        assert_eq!(grad.exit_code, EXIT_NUMERIC);
    }

    #[test]
    fn missing_config_file_is_a_validation_error() {
        let err = load_config::<SynthConfig>(Some(Path::new("/nonexistent/cfg.json")))
            .unwrap_err();
        assert_eq!(err.exit_code, EXIT_VALIDATION);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"scenes": 3, "sceens": 4}"#).unwrap();
        let err = load_config::<SynthConfig>(Some(&path)).unwrap_err();
        assert_eq!(err.exit_code, EXIT_VALIDATION);
        assert!(err.message.contains("sceens"), "{}", err.message);
    }

    #[test]
    fn partial_config_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"scenes": 3}"#).unwrap();
        let cfg: SynthConfig = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.scenes, 3);
        assert_eq!(cfg.params.size_px, SceneParams::default().size_px);
    }

    #[test]
    fn resolved_snapshot_lands_beside_a_file_output() {
        assert_eq!(
            resolved_beside(Path::new("/tmp/out/manifest.json")),
            PathBuf::from("/tmp/out/manifest.resolved_config.json")
        );
        assert_eq!(
            resolved_beside(Path::new("scene.bin")),
            PathBuf::from("scene.resolved_config.json")
        );
    }

    #[test]
    fn subset_names_parse_and_reject_typos() {
        assert_eq!(parse_subset("train").unwrap(), Subset::Train);
        assert_eq!(parse_subset("val").unwrap(), Subset::Val);
        assert_eq!(parse_subset("test").unwrap(), Subset::Test);
        assert_eq!(parse_subset("Test").unwrap_err().exit_code, EXIT_VALIDATION);
    }

    #[test]
    fn cli_parses_train_flags_into_overrides() {
        let cli = Cli::try_parse_from([
            "rainsar",
            "train",
            "--manifest",
            "m.json",
            "--data-dir",
            "d",
            "--out-dir",
            "o",
            "--loss-weights",
            "5,0.066,0,0.025,0",
            "--drop-input",
            "wspd",
            "--drop-input",
            "nesz",
            "--seed",
            "7",
            "--f64",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train");
        };
        assert_eq!(args.loss_weights.unwrap().c, 0.0);
        assert_eq!(args.drop_input, vec![DropInput::Wspd, DropInput::Nesz]);
        assert_eq!(args.seed, Some(7));
        assert!(args.use_f64);
    }

    #[test]
    fn bad_loss_weights_fail_argument_parsing() {
        let err = Cli::try_parse_from(["rainsar", "train", "--loss-weights", "1,2,3"]);
        assert!(err.is_err());
    }

    #[test]
    fn missing_required_path_names_the_flag() {
        let err = cmd_train(TrainArgs {
            config: None,
            manifest: None,
            data_dir: None,
            out_dir: None,
            loss_weights: None,
            drop_input: Vec::new(),
            seed: None,
            model_seed: None,
            use_f64: false,
        })
        .unwrap_err();
        assert_eq!(err.exit_code, EXIT_VALIDATION);
        assert!(err.message.contains("--manifest"), "{}", err.message);
    }

    #[test]
    fn evaluate_requires_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        // A manifest path is required first; build a minimal valid one via
        // the synthetic pipeline would be heavy here, so check flag order:
        // the checkpoint requirement fires after path requirements.
        let err = cmd_evaluate(EvaluateArgs {
            config: None,
            manifest: Some(dir.path().join("m.json")),
            data_dir: Some(dir.path().to_path_buf()),
            out_dir: Some(dir.path().join("out")),
            checkpoints: Vec::new(),
            subset: None,
            drop_input: Vec::new(),
            use_f64: false,
        })
        .unwrap_err();
        assert_eq!(err.exit_code, EXIT_VALIDATION);
        assert!(err.message.contains("--checkpoint"), "{}", err.message);
    }
}
