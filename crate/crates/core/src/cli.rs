//! Command-line front end: run configuration, subcommands and exit codes.
//!
//! Precedence when resolving a run: command-line flags, then the config
//! file, then the preset.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::CorruptionConfig;
use crate::data::{self, load_csv, load_named, PreprocessOptions, PreprocessState, Schema, SplitSpec};
use crate::distill::QMatchConfig;
use crate::error::{Error, Result};
use crate::model::{
    init_params, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, EncoderConfig, ModelParams, NamedArray,
};
use crate::tensor::{DType, Real};
use crate::train::{
    aggregate, append_results, finetune, linear_eval, mean_std, prepare, pretrain, read_results, run_grid, run_trial,
    select_best, Algorithm, DinoConfig, DownstreamData, GridSpec, Hyper, LoopConfig, Prepared, PretextConfig, Task,
    TrialResult, TrialSpec, VimeConfig,
};

pub const DATA_DIR_ENV: &str = "QMATCH_DATA_DIR";
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// JSON schema of the run configuration file.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schemas/run_config.schema.json");

#[derive(Debug, Parser)]
#[command(
    name = "qmatch",
    version,
    about = "Q-Match self-supervised pretraining for tabular data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Single seed; shorthand for --seeds N.
    #[arg(long, global = true, value_name = "N", conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N1,N2,..", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "NAME")]
    pub algorithm: Option<String>,
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write split manifests and the fitted preprocessing state.
    PrepareData,
    /// Pretext training; writes one checkpoint per seed.
    Pretrain,
    /// Frozen-encoder linear classifier on a checkpoint.
    LinearEval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train encoder and classifier together, starting from a checkpoint.
    Finetune {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Grid search over the configured hyperparameter lists.
    Grid,
    /// Plot-ready CSV for one sensitivity axis.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Aggregate results files into mean ± std tables with ranks.
    Report {
        #[arg(required = true, value_name = "RESULTS")]
        files: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    CorruptionHeatmap,
    QueueSize,
    LabelFraction,
    PretextSize,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::CorruptionHeatmap => "corruption-heatmap",
            SweepKind::QueueSize => "queue-size",
            SweepKind::LabelFraction => "label-fraction",
            SweepKind::PretextSize => "pretext-size",
        }
    }
}

/// Partial loop settings; unset fields keep the stage default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
}

impl LoopOverrides {
    fn apply(&self, mut base: LoopConfig) -> LoopConfig {
        base.batch_size = self.batch_size.unwrap_or(base.batch_size);
        base.max_epochs = self.max_epochs.unwrap_or(base.max_epochs);
        base.patience = self.patience.unwrap_or(base.patience);
        base.optimizer.lr = self.lr.unwrap_or(base.optimizer.lr);
        base.optimizer.weight_decay = self.weight_decay.unwrap_or(base.optimizer.weight_decay);
        base
    }
}

/// A dataset outside the presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Defaults to `<data dir>/<name>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Defaults to `<data dir>/<name>.schema.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    pub split: SplitSpec,
}

/// Axis values for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "student_axis")]
    pub p_student: Vec<f64>,
    #[serde(default = "teacher_axis")]
    pub p_teacher: Vec<f64>,
    #[serde(default = "queue_axis")]
    pub queue_sizes: Vec<usize>,
    #[serde(default = "label_axis")]
    pub label_fractions: Vec<f64>,
    /// Pretext pool sizes in rows.
    #[serde(default)]
    pub pretext_sizes: Vec<usize>,
}

fn student_axis() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5]
}

fn teacher_axis() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5]
}

fn queue_axis() -> Vec<usize> {
    vec![32, 128, 512, 2048]
}

fn label_axis() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            p_student: student_axis(),
            p_teacher: teacher_axis(),
            queue_sizes: queue_axis(),
            label_fractions: label_axis(),
            pretext_sizes: Vec::new(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_precision() -> DType {
    DType::F32
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig::desk(0)
}

fn default_temperature() -> f64 {
    PretextConfig::new(Algorithm::Infonce).temperature
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    /// Overrides the preset's split seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_precision")]
    pub precision: DType,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    /// Defaults follow the preset (quantile transform for Adult).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessOptions>,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub qmatch: QMatchConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub dino: DinoConfig,
    #[serde(default)]
    pub vime: VimeConfig,
    #[serde(default)]
    pub pretext_loop: LoopOverrides,
    #[serde(default)]
    pub downstream_loop: LoopOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Qmatch
}

fn default_task() -> Task {
    Task::Linear
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies command-line flags on top of the file values.
    pub fn with_flags(mut self, flags: &Flags) -> Result<Self> {
        if let Some(p) = &flags.preset {
            self.preset = Some(p.clone());
            self.dataset = None;
        }
        if let Some(a) = &flags.algorithm {
            self.algorithm = a.parse()?;
        }
        if let Some(s) = flags.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = &flags.seeds {
            self.seeds = s.clone();
        }
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.preset, &self.dataset) {
            (Some(_), Some(_)) => return Err(Error::Config("give either preset or dataset, not both".into())),
            (Some(p), None) => {
                data::preset(p)?;
            }
            (None, _) => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut enc = self.encoder.clone();
        enc.input_dim = enc.input_dim.max(1);
        enc.validate()?;
        self.pretext_config().validate()?;
        self.pretext_loop().validate()?;
        self.downstream_loop().validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        let s = &self.sweep;
        if s.p_student
            .iter()
            .chain(&s.p_teacher)
            .chain(&s.label_fractions)
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config(
                "sweep probabilities and fractions must lie in [0, 1]".into(),
            ));
        }
        if s.queue_sizes.contains(&0) || s.pretext_sizes.contains(&0) {
            return Err(Error::Config("sweep sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn pretext_config(&self) -> PretextConfig {
        PretextConfig {
            algorithm: self.algorithm,
            corruption: self.corruption.clone(),
            qmatch: self.qmatch.clone(),
            temperature: self.temperature,
            dino: self.dino.clone(),
            vime: self.vime.clone(),
        }
    }

    pub fn pretext_loop(&self) -> LoopConfig {
        self.pretext_loop.apply(LoopConfig::pretext(1e-3))
    }

    pub fn downstream_loop(&self) -> LoopConfig {
        self.downstream_loop.apply(LoopConfig::downstream(1e-3))
    }

    pub fn dataset_label(&self) -> String {
        match (&self.preset, &self.dataset) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.name.clone(),
            (None, None) => "unnamed".into(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.data_dir.clone())
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let mut spec = match (&self.preset, &self.dataset) {
            (Some(p), _) => data::preset(p)?.split,
            (None, Some(d)) => d.split.clone(),
            (None, None) => return Err(Error::Config("no preset or dataset configured".into())),
        };
        if let Some(s) = self.split_seed {
            spec.seed = s;
        }
        Ok(spec)
    }

    pub fn preprocess_options(&self) -> Result<PreprocessOptions> {
        if let Some(p) = &self.preprocess {
            return Ok(p.clone());
        }
        let quantile = match &self.preset {
            Some(p) => data::preset(p)?.quantile,
            None => false,
        };
        Ok(PreprocessOptions {
            quantile,
            ..PreprocessOptions::default()
        })
    }

    pub fn trial_spec(&self) -> TrialSpec {
        TrialSpec {
            dataset: self.dataset_label(),
            encoder: self.encoder.clone(),
            pretext: self.pretext_config(),
            pretext_loop: self.pretext_loop(),
            downstream_loop: self.downstream_loop(),
            task: self.task,
        }
    }

    pub fn load_dataset(&self) -> Result<data::TabularDataset> {
        let dir = self.data_dir();
        match (&self.preset, &self.dataset) {
            (Some(p), _) => load_named(&dir, data::preset(p)?.dataset),
            (None, Some(d)) => {
                let csv = d.csv.clone().unwrap_or_else(|| dir.join(format!("{}.csv", d.name)));
                let schema = d
                    .schema
                    .clone()
                    .unwrap_or_else(|| dir.join(format!("{}.schema.json", d.name)));
                load_csv(csv, &Schema::load(schema)?)
            }
            (None, None) => Err(Error::Config("no preset or dataset configured".into())),
        }
    }

    pub fn prepare(&self) -> Result<Prepared> {
        prepare(self.load_dataset()?, &self.split_spec()?, &self.preprocess_options()?)
    }

    fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.out.join(format!("{}-seed{seed}.ckpt", self.algorithm))
    }
}

/// Resolves the configuration from flags and the optional config file.
pub fn resolve(flags: &Flags) -> Result<RunConfig> {
    let base = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_flags(flags)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    if let Command::Report { files } = &cli.command {
        let dir = cli.flags.out.clone();
        if cli.flags.dry_run {
            writeln!(out, "{}", json!({"report": files, "out": dir})).map_err(stdout_err)?;
            return Ok(());
        }
        return cmd_report(files, dir.as_deref(), out);
    }
    let cfg = resolve(&cli.flags)?;
    if cli.flags.dry_run {
        writeln!(out, "{}", serde_json::to_string_pretty(&cfg)?).map_err(stdout_err)?;
        return Ok(());
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    match &cli.command {
        Command::PrepareData => cmd_prepare_data(&cfg, out),
        Command::Pretrain => dispatch!(cfg.precision, cmd_pretrain(&cfg, out)),
        Command::LinearEval { checkpoint } => {
            dispatch!(cfg.precision, cmd_eval(&cfg, Task::Linear, checkpoint.as_deref(), out))
        }
        Command::Finetune { checkpoint } => {
            dispatch!(
                cfg.precision,
                cmd_eval(&cfg, Task::Finetune, checkpoint.as_deref(), out)
            )
        }
        Command::Grid => dispatch!(cfg.precision, cmd_grid(&cfg, out)),
        Command::Sweep { kind } => dispatch!(cfg.precision, cmd_sweep(&cfg, *kind, out)),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare_data(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let p = cfg.prepare()?;
    p.splits.save(cfg.out.join("splits.json"))?;
    p.prep.save(cfg.out.join("preprocess.json"))?;
    let s = &p.splits;
    writeln!(
        out,
        "{}: pretext {} ({} train, {} val), down_train {}, down_val {}, test {}, input width {}",
        cfg.dataset_label(),
        s.pretext_len(),
        s.pretext_train.len(),
        s.pretext_val.len(),
        s.down_train.len(),
        s.down_val.len(),
        s.test.len(),
        p.prep.output_dim()
    )
    .map_err(stdout_err)
}

/// Refuses to mix a checkpoint with preprocessing fitted differently.
fn check_preprocess(cfg: &RunConfig, prep: &PreprocessState) -> Result<()> {
    let path = cfg.out.join("preprocess.json");
    if path.exists() && &PreprocessState::load(&path)? != prep {
        return Err(Error::Config(format!(
            "{} was fitted with different data or options; rerun prepare-data",
            path.display()
        )));
    }
    prep.save(&path)
}

pub fn cmd_pretrain<T: Real>(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    if cfg.algorithm == Algorithm::Supervised {
        return Err(Error::Config("the supervised baseline has no pretext task".into()));
    }
    let p = cfg.prepare()?;
    check_preprocess(cfg, &p.prep)?;
    let enc = EncoderConfig {
        input_dim: p.prep.output_dim(),
        ..cfg.encoder.clone()
    };
    for &seed in &cfg.seeds {
        let o = pretrain::<T>(
            &p.data,
            &p.splits,
            &p.prep,
            &enc,
            &cfg.pretext_config(),
            &cfg.pretext_loop(),
            seed,
        )?;
        let best_val = o.history.get(o.best_epoch).map_or(f64::NAN, |h| h.val_loss);
        let mut arrays = Vec::new();
        let mut extra = json!({
            "best_epoch": o.best_epoch,
            "epochs_run": o.epochs_run,
            "best_val_loss": best_val,
            "history": o.history,
        });
        if let Some(q) = &o.queue {
            arrays.push(NamedArray::new("queue", q.storage().clone()));
            extra["queue_cursor"] = json!(q.cursor());
            extra["queue_filled"] = json!(q.len());
            extra["queue_mean_cosine"] = json!(q.mean_pairwise_cosine());
        }
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                config: enc.clone(),
                seed,
                step: o.steps,
                algorithm: cfg.algorithm.name().into(),
                preprocess_ref: Some("preprocess.json".into()),
                has_classifier: false,
                ema_decay: o.ema.as_ref().map(|e| e.decay()),
                extra,
            },
            params: o.student.clone(),
            ema: o.ema.clone(),
            arrays,
        };
        let path = cfg.checkpoint_path(seed);
        save_checkpoint(&path, &ckpt)?;
        if let Some(d) = &o.diverged {
            return Err(Error::Diverged(format!(
                "seed {seed}: {d}; last good state saved to {}",
                path.display()
            )));
        }
        writeln!(
            out,
            "seed {seed}: best epoch {} of {}, validation loss {best_val:.5}, checkpoint {}",
            o.best_epoch,
            o.epochs_run,
            path.display()
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}

fn load_encoder<T: Real>(cfg: &RunConfig, path: Option<&Path>, seed: u64, input_dim: usize) -> Result<ModelParams<T>> {
    let enc = EncoderConfig {
        input_dim,
        ..cfg.encoder.clone()
    };
    if cfg.algorithm == Algorithm::Supervised && path.is_none() && cfg.checkpoint.is_none() {
        return init_params(&enc, seed);
    }
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| cfg.checkpoint.clone())
        .unwrap_or_else(|| cfg.checkpoint_path(seed));
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found; run pretrain first"),
        ));
    }
    let mut params = load_checkpoint::<T>(&path, Some(&enc))?.params;
    params.classifier = None;
    Ok(params)
}

pub fn cmd_eval<T: Real>(
    cfg: &RunConfig,
    task: Task,
    checkpoint: Option<&Path>,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let p = cfg.prepare()?;
    check_preprocess(cfg, &p.prep)?;
    let data = DownstreamData::<T>::from_splits(&p.data, &p.splits, &p.prep)?;
    let lc = cfg.downstream_loop();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let start = std::time::Instant::now();
        let encoder = load_encoder::<T>(cfg, checkpoint, seed, p.prep.output_dim())?;
        let o = match task {
            Task::Linear => linear_eval(&encoder, &data, &lc, seed)?,
            Task::Finetune => finetune(&encoder, &data, &lc, seed)?,
        };
        let r = TrialResult {
            algorithm: cfg.algorithm.name().into(),
            dataset: cfg.dataset_label(),
            task,
            hyperparameters: [("lr".to_string(), lc.optimizer.lr)].into(),
            seed,
            val_accuracy: o.val_accuracy,
            test_accuracy: o.test_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
            failed: None,
        };
        writeln!(
            out,
            "seed {seed}: {} validation {:.2}%, test {:.2}% (best epoch {})",
            task.name(),
            o.val_accuracy,
            o.test_accuracy,
            o.best_epoch
        )
        .map_err(stdout_err)?;
        results.push(r);
    }
    append_results(cfg.out.join("results.jsonl"), &results)?;
    if results.len() > 1 {
        let (m, s) = mean_std(&results.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
        writeln!(out, "test accuracy {m:.2} ± {s:.2} over {} seeds", results.len()).map_err(stdout_err)?;
    }
    Ok(())
}

pub fn cmd_grid<T: Real>(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let p = cfg.prepare()?;
    let grid = cfg.grid.clone().unwrap_or_else(|| GridSpec::full(cfg.algorithm));
    let (results, summaries) = run_grid::<T>(&p, &cfg.trial_spec(), &grid, &cfg.seeds)?;
    append_results(cfg.out.join("results.jsonl"), &results)?;
    let best = select_best(&summaries);
    write_json(&cfg.out.join("grid.json"), &json!({"points": summaries, "best": best}))?;
    for s in &summaries {
        writeln!(
            out,
            "{:?}: validation {:.2}, test {:.2}{}",
            s.hyper,
            s.mean_val_accuracy,
            s.mean_test_accuracy,
            if s.failed { " (failed)" } else { "" }
        )
        .map_err(stdout_err)?;
    }
    match best {
        Some(b) => writeln!(out, "best {:?}: test {:.2}", b.hyper, b.mean_test_accuracy).map_err(stdout_err),
        None => Err(Error::Diverged("every grid point failed".into())),
    }
}

/// One sweep cell: axis values and the configuration that realizes them.
struct Cell {
    axes: Vec<(&'static str, f64)>,
    cfg: RunConfig,
}

fn sweep_cells(cfg: &RunConfig, kind: SweepKind) -> Result<Vec<Cell>> {
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    match kind {
        SweepKind::CorruptionHeatmap => {
            for &pt in &s.p_teacher {
                for &ps in &s.p_student {
                    let mut c = cfg.clone();
                    c.corruption.p_student = ps;
                    c.corruption.p_teacher = pt;
                    cells.push(Cell {
                        axes: vec![("p_teacher", pt), ("p_student", ps)],
                        cfg: c,
                    });
                }
            }
        }
        SweepKind::QueueSize => {
            for &q in &s.queue_sizes {
                let mut c = cfg.clone();
                c.qmatch.queue_capacity = q;
                cells.push(Cell {
                    axes: vec![("queue_size", q as f64)],
                    cfg: c,
                });
            }
        }
        SweepKind::LabelFraction => {
            let base = cfg.split_spec()?;
            for &f in &s.label_fractions {
                let mut c = cfg.clone();
                c.dataset = Some(DatasetConfig {
                    name: cfg.dataset_label(),
                    csv: None,
                    schema: None,
                    split: SplitSpec {
                        label_fraction: f,
                        ..base.clone()
                    },
                });
                cells.push(Cell {
                    axes: vec![("label_fraction", f)],
                    cfg: c,
                });
            }
        }
        SweepKind::PretextSize => {
            if s.pretext_sizes.is_empty() {
                return Err(Error::Config("sweep.pretext_sizes is empty".into()));
            }
            let base = cfg.split_spec()?;
            for &n in &s.pretext_sizes {
                let mut c = cfg.clone();
                c.dataset = Some(DatasetConfig {
                    name: cfg.dataset_label(),
                    csv: None,
                    schema: None,
                    split: SplitSpec {
                        pretext: Some(n),
                        ..base.clone()
                    },
                });
                cells.push(Cell {
                    axes: vec![("pretext_size", n as f64)],
                    cfg: c,
                });
            }
        }
    }
    for c in &mut cells {
        if matches!(kind, SweepKind::LabelFraction | SweepKind::PretextSize) {
            // the split changed, so the dataset is addressed by its file name
            if let Some(p) = &cfg.preset {
                let pr = data::preset(p)?;
                c.cfg.preprocess = Some(cfg.preprocess_options()?);
                c.cfg.preset = None;
                if let Some(d) = c.cfg.dataset.as_mut() {
                    d.csv = Some(cfg.data_dir().join(format!("{}.csv", pr.dataset)));
                    d.schema = Some(cfg.data_dir().join(format!("{}.schema.json", pr.dataset)));
                }
            }
        }
        c.cfg.validate()?;
    }
    Ok(cells)
}

/// Runs every sweep cell for every seed. Writes `sweep-<kind>.csv` with one
/// row per cell and seed and `sweep-<kind>-summary.csv` with mean and std.
pub fn cmd_sweep<T: Real>(cfg: &RunConfig, kind: SweepKind, out: &mut dyn std::io::Write) -> Result<()> {
    let cells = sweep_cells(cfg, kind)?;
    let axis_names: Vec<&str> = cells[0].axes.iter().map(|a| a.0).collect();
    let mut rows = csv::Writer::from_writer(Vec::new());
    let mut summary = csv::Writer::from_writer(Vec::new());
    let header = |extra: &[&str]| {
        axis_names
            .iter()
            .copied()
            .chain(extra.iter().copied())
            .map(String::from)
            .collect::<Vec<_>>()
    };
    rows.write_record(header(&["seed", "val_accuracy", "test_accuracy"]))?;
    summary.write_record(header(&["mean_test_accuracy", "std_test_accuracy", "n"]))?;
    let mut all = Vec::new();
    for cell in &cells {
        let p = cell.cfg.prepare()?;
        let spec = TrialSpec {
            dataset: cfg.dataset_label(),
            ..cell.cfg.trial_spec()
        };
        let mut acc = Vec::new();
        for &seed in &cfg.seeds {
            let mut r = run_trial::<T>(&p, &spec, &Hyper::new(), seed)?.result;
            r.hyperparameters
                .extend(cell.axes.iter().map(|(k, v)| (k.to_string(), *v)));
            let axes = cell.axes.iter().map(|a| a.1.to_string());
            let (v, t) = if r.ok() {
                acc.push(r.test_accuracy);
                (r.val_accuracy.to_string(), r.test_accuracy.to_string())
            } else {
                (String::new(), String::new())
            };
            rows.write_record(axes.chain([seed.to_string(), v, t]))?;
            writeln!(out, "{:?} seed {seed}: test {:.2}", cell.axes, r.test_accuracy).map_err(stdout_err)?;
            all.push(r);
        }
        let (m, s) = mean_std(&acc);
        summary.write_record(cell.axes.iter().map(|a| a.1.to_string()).chain([
            m.to_string(),
            s.to_string(),
            acc.len().to_string(),
        ]))?;
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    for (name, w) in [
        (format!("sweep-{}.csv", kind.name()), rows),
        (format!("sweep-{}-summary.csv", kind.name()), summary),
    ] {
        let path = cfg.out.join(name);
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    append_results(cfg.out.join("results.jsonl"), &all)
}

/// Aggregates results files into one table per downstream task. Writes
/// `report.txt` and `report.json` when `out_dir` is given.
pub fn cmd_report(files: &[PathBuf], out_dir: Option<&Path>, out: &mut dyn std::io::Write) -> Result<()> {
    let mut results = Vec::new();
    for f in files {
        results.extend(read_results(f)?);
    }
    if results.is_empty() {
        return Err(Error::Data("no results in the given files".into()));
    }
    let mut text = String::new();
    let mut tables = serde_json::Map::new();
    for task in [Task::Linear, Task::Finetune] {
        let subset: Vec<TrialResult> = results.iter().filter(|r| r.task == task).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let table = aggregate(&subset)?;
        text.push_str(&format!("{}\n{}\n", task.name(), table.to_text()));
        tables.insert(task.name().into(), serde_json::to_value(&table)?);
    }
    write!(out, "{text}").map_err(stdout_err)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, &text).map_err(|e| Error::io(&txt, e))?;
        write_json(&dir.join("report.json"), &tables)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig {
            preset: Some("adult-1pct".into()),
            ..RunConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.pretext_loop().batch_size, 512);
        assert_eq!(c.downstream_loop().optimizer.weight_decay, 0.1);
        assert!(c.preprocess_options().unwrap().quantile);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"algorithm":"qmatch","learning_rate":1}"#, "cfg").unwrap_err();
        assert!(e.is_config(), "{e}");
        assert!(RunConfig::from_json(r#"{"algorithm":"byol"}"#, "cfg").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig::from_json(r#"{"preset":"adult-1pct","seeds":[1,2],"algorithm":"vime"}"#, "cfg").unwrap();
        let flags = Flags {
            seed: Some(9),
            algorithm: Some("dino".into()),
            preset: Some("mnist-1pct".into()),
            ..Flags::default()
        };
        let c = file.with_flags(&flags).unwrap();
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.algorithm, Algorithm::Dino);
        assert_eq!(c.preset.as_deref(), Some("mnist-1pct"));
    }

    #[test]
    fn both_preset_and_dataset_is_an_error() {
        let c = RunConfig::from_json(
            r#"{"preset":"adult-1pct","dataset":{"name":"x","split":{"pretext":null,"down_train":1,"down_val":1,"test":{"kind":"tail","rows":1}}}}"#,
            "cfg",
        )
        .unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn published_schema_lists_every_field() {
        let schema: serde_json::Value = serde_json::from_str(RUN_CONFIG_SCHEMA).unwrap();
        assert_eq!(schema["additionalProperties"], json!(false));
        let props: Vec<&String> = schema["properties"].as_object().unwrap().keys().collect();
        let full = RunConfig {
            preset: Some("adult-1pct".into()),
            dataset: None,
            split_seed: Some(0),
            data_dir: Some("d".into()),
            preprocess: Some(PreprocessOptions::default()),
            grid: Some(GridSpec::default()),
            checkpoint: Some("c".into()),
            ..RunConfig::default()
        };
        let mut keys: Vec<String> = serde_json::to_value(&full)
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        keys.push("dataset".into());
        keys.sort();
        let mut props: Vec<String> = props.into_iter().cloned().collect();
        props.sort();
        assert_eq!(props, keys);
    }
}
