//! The `sslchrono` command line: `generate`, `pretrain`, `finetune`,
//! `evaluate`, `sweep` and `plot`.
//!
//! Every command reads the same settings (defaults, then `--config`, then
//! `SSLCHRONO_SEED`, then flags), works inside the output directory and
//! writes its resolved configuration next to what it produced. Failures print
//! one `error category=<name>: <message>` line on standard error.

pub mod checkpoint;
pub mod config;
pub mod files;
pub mod plot;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{generate_cohort, select, split_cohort, CohortError, FeatureStats};
use crate::evaluation::{
    finetune_backbone, pretrain_backbone, run_sweep, score_test_set, Backbone, EvalError, PretrainSummary, StudyData,
    SweepCell, SweepObserver,
};
use crate::training::{TrainError, TrainReport};
use crate::transformer::{expect_head, HeadKind, ModelError};

use checkpoint::{Checkpoint, CheckpointError};
use config::{ConfigBuilder, ConfigError, RunConfig, SEED_ENV};
use files::ParseError;

pub const DATASET_FILE: &str = "dataset.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const STATS_FILE: &str = "stats.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} not found; {hint}")]
    MissingInput { path: PathBuf, hint: &'static str },
    #[error(transparent)]
    Dataset(#[from] ParseError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{failed} of {total} sweep cells failed")]
    SweepCells { failed: usize, total: usize },
}

fn model_category(e: &ModelError) -> &'static str {
    match e {
        ModelError::HeadMismatch { .. } => "head-mismatch",
        _ => "model",
    }
}

fn train_category(e: &TrainError) -> &'static str {
    match e {
        TrainError::Model(m) => model_category(m),
        TrainError::NonFinite { .. } => "non-finite",
        TrainError::SingleClass(_) | TrainError::EmptyDataset => "training-data",
        _ => "training",
    }
}

impl CliError {
    /// Stable machine-readable name of the failure.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::MissingInput { .. } => "missing-input",
            CliError::Dataset(_) | CliError::Cohort(_) => "dataset",
            CliError::Checkpoint {
                source: CheckpointError::Checksum { .. },
                ..
            } => "checksum",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Train(e) => train_category(e),
            CliError::Eval(e) => match e {
                EvalError::UndefinedAuc { .. } => "undefined-auc",
                EvalError::UnknownSize(_) => "unknown-size",
                EvalError::Leakage(_) => "leakage",
                EvalError::Cohort(_) => "dataset",
                EvalError::Train(t) => train_category(t),
                EvalError::Model(m) => model_category(m),
                EvalError::LengthMismatch(..) => "evaluation",
            },
            CliError::Model(e) => model_category(e),
            CliError::SweepCells { .. } => "sweep-cell",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sslchrono", version, about = "Next-day pretraining and illness-detection sweeps on synthetic wearable data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` settings file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Master seed; overrides the config file and SSLCHRONO_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort with its split and standardization stats.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain a next-day predictor on the SSL population.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// rhr, tib or cal.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Train a classification head on a frozen pretrained backbone.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Adaptation set size.
        #[arg(long)]
        n_adapt: Option<usize>,
    },
    /// Score the test participants with a classification checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain every objective and fine-tune on every adaptation size.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Also fine-tune a never-pretrained backbone.
        #[arg(long)]
        baseline: bool,
    },
    /// Draw the AUC-by-size chart from a sweep CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Sweep CSV; defaults to sweep.csv in the output directory.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_input(dir: &Path, name: &str, hint: &'static str) -> Result<String, CliError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::MissingInput { path, hint });
    }
    read_text(&path)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve(command: &Command, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let common = command.common();
    let mut builder = ConfigBuilder::default();
    if let Some(path) = &common.config {
        builder.apply_text(&read_text(path)?)?;
    }
    if let Some(seed) = env_seed {
        builder.set("seed", seed.trim()).map_err(|_| ConfigError::BadValue {
            key: SEED_ENV.into(),
            value: seed.into(),
            reason: "expected an unsigned integer".into(),
        })?;
    }
    for pair in &common.set {
        builder.apply_override(pair)?;
    }
    if let Some(seed) = common.seed {
        builder.set("seed", &seed.to_string())?;
    }
    if let Some(dir) = &common.output_dir {
        builder.set("output_dir", &dir.display().to_string())?;
    }
    match command {
        Command::Pretrain {
            objective: Some(f), ..
        } => builder.set("task.objective", f)?,
        Command::Finetune { checkpoint, n_adapt, .. } => {
            if let Some(p) = checkpoint {
                builder.set("task.checkpoint", &p.display().to_string())?;
            }
            if let Some(n) = n_adapt {
                builder.set("task.n_adapt", &n.to_string())?;
            }
        }
        Command::Evaluate {
            checkpoint: Some(p), ..
        } => builder.set("task.checkpoint", &p.display().to_string())?,
        Command::Sweep { baseline: true, .. } => builder.set("sweep.baseline", "true")?,
        Command::Plot { input: Some(p), .. } => builder.set("task.input", &p.display().to_string())?,
        _ => {}
    }
    Ok(builder.resolve()?)
}

/// Parses `args` (program name first) and runs the command. Progress and
/// results go to `out`.
pub fn run<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return Ok(());
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("bad arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let cfg = resolve(&cli.command, env_seed)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| CliError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut ctx = Context { cfg: &cfg, out };
    match &cli.command {
        Command::Generate { .. } => ctx.generate(),
        Command::Pretrain { .. } => ctx.pretrain(),
        Command::Finetune { .. } => ctx.finetune(),
        Command::Evaluate { .. } => ctx.evaluate(),
        Command::Sweep { .. } => ctx.sweep(),
        Command::Plot { .. } => ctx.plot(),
    }
}

/// Runs with the process arguments and environment; prints the error line.
pub fn main_entry() -> ExitCode {
    let env_seed = std::env::var(SEED_ENV).ok();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(std::env::args_os(), env_seed.as_deref(), &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error category={}: {message}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}

struct Context<'a> {
    cfg: &'a RunConfig,
    out: &'a mut dyn Write,
}

struct Progress<'a>(&'a mut dyn Write);

impl SweepObserver for Progress<'_> {
    fn pretrained(&mut self, s: &PretrainSummary) {
        let _ = writeln!(
            self.0,
            "pretrained objective={} final_loss={} mean_predictor_mse={}",
            s.objective.as_str(),
            s.report.epoch_loss.last().copied().unwrap_or(f64::NAN),
            s.mean_predictor_mse
        );
    }

    fn cell_done(&mut self, c: &SweepCell) {
        let auc = match &c.auc {
            Ok(a) => a.to_string(),
            Err(e) => format!("NA ({e})"),
        };
        let _ = writeln!(self.0, "cell objective={} n={} auc={auc}", c.backbone.as_str(), c.n_adaptation);
    }
}

impl Context<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        write_file(&self.path(name), contents)
    }

    fn write_config(&self, stem: &str) -> Result<(), CliError> {
        self.write(&format!("{stem}.config.txt"), self.cfg.to_text())
    }

    fn write_report(&self, stem: &str, report: &TrainReport) -> Result<(), CliError> {
        self.write(&format!("{stem}.report.csv"), files::report_csv(report))?;
        self.write(&format!("{stem}.steps.csv"), files::steps_csv(report))
    }

    fn load_study(&self) -> Result<StudyData, CliError> {
        const HINT: &str = "run `sslchrono generate` with the same output directory first";
        let dir = &self.cfg.output_dir;
        let dataset = read_input(dir, DATASET_FILE, HINT)?;
        let cohort = files::parse_dataset(&dataset, None)?;
        let splits = files::parse_splits(&read_input(dir, SPLITS_FILE, HINT)?, &self.cfg.split.adaptation_sizes)?;
        let known: std::collections::HashSet<u32> = cohort.iter().map(|s| s.participant_id).collect();
        if let Some(id) = splits
            .ssl_train
            .iter()
            .chain(&splits.adaptation_pool)
            .chain(&splits.test)
            .find(|id| !known.contains(id))
        {
            return Err(ParseError {
                file: SPLITS_FILE.into(),
                line: 0,
                reason: format!("participant {id} is not in the dataset"),
            }
            .into());
        }
        Ok(StudyData::new(&cohort, splits)?)
    }

    fn load_checkpoint(&self) -> Result<(PathBuf, Checkpoint), CliError> {
        let path = self
            .cfg
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
        let bytes = std::fs::read(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|source| CliError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        Ok((path, ckpt))
    }

    fn generate(&mut self) -> Result<(), CliError> {
        let cohort = generate_cohort(&self.cfg.cohort)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.split_seed);
        let splits = split_cohort(&cohort, &self.cfg.split, &mut rng)?;
        let stats = FeatureStats::fit(select(&cohort, &splits.ssl_train))?;
        self.write(DATASET_FILE, files::dataset_csv(&cohort))?;
        self.write(EPISODES_FILE, files::episodes_csv(&cohort))?;
        self.write(SPLITS_FILE, files::splits_csv(&splits))?;
        self.write(STATS_FILE, files::stats_csv(&stats))?;
        self.write_config("generate")?;
        let cases = cohort.iter().filter(|s| s.is_case()).count();
        let _ = writeln!(
            self.out,
            "generated participants={} days={} cases={} ssl_train={} adaptation_pool={} test={}",
            cohort.len(),
            self.cfg.cohort.horizon_days,
            cases,
            splits.ssl_train.len(),
            splits.adaptation_pool.len(),
            splits.test.len()
        );
        Ok(())
    }

    fn pretrain(&mut self) -> Result<(), CliError> {
        let objective = self
            .cfg
            .objective
            .ok_or_else(|| CliError::Usage("--objective is required (rhr, tib or cal)".into()))?;
        let data = self.load_study()?;
        let (model, summary) = pretrain_backbone(&data, &self.cfg.sweep_config(), objective)?;
        let stem = format!("pretrain_{}", objective.as_str());
        let ckpt = Checkpoint::new(model)
            .with_meta("objective", objective.as_str())
            .with_meta("stage", "pretrain")
            .with_meta("seed", &summary.seed.to_string());
        self.write(&format!("{stem}.ckpt"), ckpt.to_bytes())?;
        self.write_report(&stem, &summary.report)?;
        self.write_config(&stem)?;
        Progress(&mut *self.out).pretrained(&summary);
        Ok(())
    }

    fn finetune(&mut self) -> Result<(), CliError> {
        let n = self
            .cfg
            .n_adapt
            .ok_or_else(|| CliError::Usage("--n-adapt is required".into()))?;
        if !self.cfg.split.adaptation_sizes.contains(&n) {
            return Err(EvalError::UnknownSize(n).into());
        }
        let (path, ckpt) = self.load_checkpoint()?;
        let tag = ckpt.meta.get("objective").cloned().unwrap_or_default();
        let backbone = Backbone::parse(&tag).ok_or_else(|| CliError::Checkpoint {
            path: path.clone(),
            source: CheckpointError::Malformed(format!("unknown objective tag {tag:?}")),
        })?;
        let data = self.load_study()?;
        let (tuned, report) = finetune_backbone(&data, &ckpt.params, &self.cfg.sweep_config(), backbone, n)?;
        let stem = format!("finetune_{}_n{n}", backbone.as_str());
        let out = Checkpoint::new(tuned)
            .with_meta("objective", backbone.as_str())
            .with_meta("stage", "finetune")
            .with_meta("n_adapt", &n.to_string())
            .with_meta("backbone_sha256", &ckpt.params.backbone_checksum());
        self.write(&format!("{stem}.ckpt"), out.to_bytes())?;
        self.write_report(&stem, &report)?;
        self.write_config(&stem)?;
        let _ = writeln!(
            self.out,
            "finetuned objective={} n_adapt={n} final_loss={}",
            backbone.as_str(),
            report.epoch_loss.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    }

    fn evaluate(&mut self) -> Result<(), CliError> {
        let (path, ckpt) = self.load_checkpoint()?;
        expect_head(&ckpt.params, HeadKind::Classification)?;
        let data = self.load_study()?;
        let scored = score_test_set(&ckpt.params, &data.test_windows())?;
        let stem = format!(
            "evaluate_{}",
            path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy())
        );
        self.write(&format!("{stem}.scores.csv"), files::scores_csv(&scored))?;
        self.write_config(&stem)?;
        let auc = scored.auc()?;
        let _ = writeln!(self.out, "auc={auc}");
        Ok(())
    }

    fn sweep(&mut self) -> Result<(), CliError> {
        let data = self.load_study()?;
        let result = run_sweep(&data, &self.cfg.sweep_config(), &mut Progress(&mut *self.out))?;
        let csv = files::sweep_csv(&result);
        self.write("sweep.csv", &csv)?;
        let rows = files::parse_sweep(&csv)?;
        self.write("sweep.svg", plot::sweep_svg(&rows))?;
        for s in &result.pretraining {
            self.write(&format!("sweep_pretrain_{}.report.csv", s.objective.as_str()), files::report_csv(&s.report))?;
        }
        self.write_config("sweep")?;
        let failed = result.failures().count();
        if failed > 0 {
            return Err(CliError::SweepCells {
                failed,
                total: result.cells.len() + result.baseline.len(),
            });
        }
        Ok(())
    }

    fn plot(&mut self) -> Result<(), CliError> {
        let input = self.cfg.input.clone().unwrap_or_else(|| self.path("sweep.csv"));
        if !input.exists() {
            return Err(CliError::MissingInput {
                path: input,
                hint: "run `sslchrono sweep` first or pass --input",
            });
        }
        let rows = files::parse_sweep(&read_text(&input)?)?;
        self.write("plot.svg", plot::sweep_svg(&rows))?;
        self.write_config("plot")?;
        let _ = writeln!(self.out, "plotted rows={} to {}", rows.len(), self.path("plot.svg").display());
        Ok(())
    }
}
