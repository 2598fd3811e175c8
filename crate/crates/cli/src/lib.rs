//! The `lga` command-line driver: dataset synthesis, training, evaluation,
//! ablation sweeps and gradient checks.

pub mod ablate;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lga_core::data::{write_dataset, Dataset, LabelMode, SynthSpec};
use lga_core::gradcheck::{self, GradcheckReport, GradcheckSpec};
use lga_core::model::{count_parameters, Model, ModelConfig};
use lga_core::nn::ParamStore;
use lga_core::train::{evaluate, train, write_log_csv, EpochLog, MetricsReport, TrainOutcome};
use lga_core::{weights, Element, Error, OpKind, Precision};
use serde::{Deserialize, Serialize};

pub use ablate::{cmd_ablate, AblationRow, AblationTable, Axis};
pub use config::{DataConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    /// The command ran but its check failed; exit code 1.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) | CliError::Core(Error::Usage(_)) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

// ── synth ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Number of records.
    #[arg(long)]
    pub n: usize,
    /// Output `.lgae` file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub leads: usize,
    #[arg(long, default_value_t = 4096)]
    pub len: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Exactly one class per record instead of independent multi-hot labels.
    #[arg(long)]
    pub one_hot: bool,
    /// Per-class probability in multi-hot mode.
    #[arg(long, default_value_t = 0.3)]
    pub prevalence: f64,
    /// Also write a labels CSV here.
    #[arg(long)]
    pub labels_csv: Option<PathBuf>,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::new(self.n, self.classes, self.seed, self.leads, self.len);
        spec.labels = if self.one_hot {
            LabelMode::OneHot
        } else {
            LabelMode::MultiHot {
                prevalence: self.prevalence,
            }
        };
        spec
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Dataset> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let ds = lga_core::data::synth_dataset(&args.spec())?;
    write_dataset(&ds, &args.out)?;
    if let Some(csv) = &args.labels_csv {
        ds.write_labels_csv(csv)?;
    }
    Ok(ds)
}

// ── train ────────────────────────────────────────────────────────────────────

/// Everything `train` writes into its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<MetricsReport>,
}

pub const WEIGHTS_FILE: &str = "weights.lgaw";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "effective_config.json";

pub struct Trained<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub outcome: TrainOutcome,
    pub dev: Option<MetricsReport>,
}

/// Split, initialise and train in memory.
pub fn fit<T: Element>(cfg: &RunConfig, progress: bool) -> Result<Trained<T>> {
    cfg.validate()?;
    let (train_set, val_set, dev_set) = cfg.splits()?;
    let (model, mut store) = Model::init::<T>(&cfg.model, cfg.seed)?;
    let outcome = train(&model, &mut store, &train_set, &val_set, &cfg.train, cfg.seed, |e: &EpochLog| {
        if progress {
            eprintln!(
                "epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}  macro-F1 {:.4}",
                e.epoch, e.lr, e.train_loss, e.val_loss, e.macro_f1
            );
        }
    })?;
    let dev = if dev_set.is_empty() {
        None
    } else {
        Some(evaluate(&model, &store, &dev_set, cfg.train.threshold, cfg.train.batch_size)?)
    };
    Ok(Trained {
        model,
        store,
        outcome,
        dev,
    })
}

fn train_and_save<T: Element>(cfg: &RunConfig, out: &Path, progress: bool) -> Result<TrainSummary> {
    let t = fit::<T>(cfg, progress)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    weights::save(&out.join(WEIGHTS_FILE), &t.model.config, &t.store)?;
    write_log_csv(&out.join(LOG_FILE), &t.outcome.log)?;
    let summary = TrainSummary {
        parameters: count_parameters(&t.store),
        epochs_run: t.outcome.log.len(),
        best_epoch: t.outcome.best_epoch,
        stopped_early: t.outcome.stopped_early,
        val: t.outcome.best_val.clone(),
        dev: t.dev,
    };
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n")?;
    Ok(summary)
}

/// Train per `cfg` and write weights, log, metrics and the effective
/// config into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, progress: bool) -> Result<TrainSummary> {
    match cfg.model.precision {
        Precision::F32 => train_and_save::<f32>(cfg, out, progress),
        Precision::F64 => train_and_save::<f64>(cfg, out, progress),
    }
}

// ── eval ─────────────────────────────────────────────────────────────────────

fn eval_with<T: Element>(weights_path: &Path, ds: &Dataset, threshold: f64, batch: usize) -> Result<MetricsReport> {
    let (model, store) = weights::load::<T>(weights_path)?;
    let m = &model.config;
    if (ds.leads, ds.len, ds.classes) != (m.leads, m.input_len, m.classes) {
        return Err(CliError::Usage(format!(
            "dataset has {} leads × {} samples × {} classes, model expects {} × {} × {}",
            ds.leads, ds.len, ds.classes, m.leads, m.input_len, m.classes
        )));
    }
    Ok(evaluate(&model, &store, ds, threshold, batch)?)
}

/// Evaluate saved weights on a dataset file. Precision defaults to the one
/// recorded with the weights.
pub fn cmd_eval(weights_path: &Path, data: &Path, threshold: f64, precision: Option<Precision>) -> Result<MetricsReport> {
    for p in [weights_path, data] {
        if !p.exists() {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    let ds = lga_core::data::read_dataset(data)?;
    if ds.is_empty() {
        return Err(CliError::Core(Error::Config(format!("{} holds no records", data.display()))));
    }
    let sidecar: ModelConfig = serde_json::from_str(&fs::read_to_string(weights::sidecar_path(weights_path))?).map_err(Error::from)?;
    match precision.unwrap_or(sidecar.precision) {
        Precision::F32 => eval_with::<f32>(weights_path, &ds, threshold, 32),
        Precision::F64 => eval_with::<f64>(weights_path, &ds, threshold, 32),
    }
}

// ── gradcheck ────────────────────────────────────────────────────────────────

/// Finite-difference check of every op, attention variant, block and the
/// given (small) model. `fault` deliberately corrupts one backward rule.
pub fn cmd_gradcheck(model: &ModelConfig, spec: &GradcheckSpec, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut model = model.clone();
    model.precision = Precision::F64;
    model.validate()?;
    let cases = gradcheck::standard_cases(spec.seed, &model)?;
    Ok(gradcheck::run(&cases, spec, fault)?)
}

// ── argument parsing ─────────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(name = "lga", version, about = "Local-global attention ECG classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(&self.config)?.with_overrides(self.seed, self.precision.map(Into::into));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train a model from a run configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate saved weights on a dataset file.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per setting along one ablation axis.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Window lengths for `--axis window`.
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32, 64, 128])]
        windows: Vec<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Run configuration whose model is checked end to end; defaults to
        /// the miniature model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the backward rule of this op (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Cap rayon's worker count from `LGA_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LGA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("LGA_THREADS must be a positive integer, got {v:?}")))?;
        // A second initialisation (e.g. in tests) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(args) => {
            let ds = cmd_synth(&args)?;
            println!("wrote {} records to {}", ds.len(), args.out.display());
        }
        Command::Train { run, quiet } => {
            let cfg = run.load()?;
            let s = cmd_train(&cfg, &run.out, !quiet)?;
            println!(
                "trained {} parameters for {} epochs (best {}), validation macro-F1 {:.4}",
                s.parameters, s.epochs_run, s.best_epoch, s.val.macro_avg.f1
            );
            if let Some(dev) = &s.dev {
                println!("dev set:\n{}", dev.table());
            }
            println!("artifacts in {}", run.out.display());
        }
        Command::Eval {
            weights,
            data,
            threshold,
            precision,
            out,
        } => {
            let report = cmd_eval(&weights, &data, threshold, precision.map(Into::into))?;
            eprint!("{}", report.table());
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            write_or_print(out.as_deref(), &json)?;
        }
        Command::Ablate {
            run,
            axis,
            windows,
            quiet,
        } => {
            let cfg = run.load()?;
            let table = cmd_ablate(&cfg, axis, &windows, !quiet)?;
            fs::create_dir_all(&run.out)?;
            let stem = format!("ablation_{}", axis.name());
            table.write_csv(&run.out.join(format!("{stem}.csv")))?;
            fs::write(run.out.join(format!("{stem}.txt")), table.text())?;
            print!("{}", table.text());
        }
        Command::Gradcheck {
            config,
            seed,
            tolerance,
            out,
            inject_fault,
        } => {
            let model = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => gradcheck::miniature_config(),
            };
            let fault = inject_fault
                .map(|name| OpKind::from_name(&name).ok_or_else(|| CliError::Usage(format!("unknown op {name:?}"))))
                .transpose()?;
            let spec = GradcheckSpec {
                tolerance,
                seed,
                ..GradcheckSpec::default()
            };
            let report = cmd_gradcheck(&model, &spec, fault)?;
            print!("{}", report.table());
            if let Some(p) = out {
                fs::write(p, serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n")?;
            }
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
                return Err(CliError::Failed(format!("gradient check failed for: {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
