use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pulsebp_cli::config::PipelineConfig;
use pulsebp_cli::error::{AtPath, ErrorKind, ErrorReport, Failure};
use pulsebp_cli::stages::{self, DatasetFormat, Source};
use pulsebp_core::waveform::SynthConfig;
use pulsebp_model::training::GroupBy;

/// Cuff-less blood-pressure estimation from PPG: preprocessing, cycle
/// segmentation, morphological features, an attention-based regressor and
/// standards-based evaluation.
///
/// Settings come from the built-in defaults, then `--config`, then flags.
/// Failures exit with 2 (usage), 3 (validation), 4 (data) or 5 (numeric
/// divergence) and print one JSON object on stderr.
#[derive(Debug, Parser)]
#[command(name = "pulsebp", version)]
struct Cli {
    /// Pipeline configuration JSON; unknown keys are rejected [default: built-in defaults]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice [default: the config's seed, 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr [default: off]
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic PPG/ABP record, or a whole cohort with --cohort
    Synth(SynthArgs),
    /// Clean, bandpass-filter and smooth one record
    Preprocess(PreprocessArgs),
    /// Extract foot-to-foot cycles and ABP labels from a preprocessed record
    Segment(SegmentArgs),
    /// Compute per-cycle features and stack them into a dataset
    Features(FeaturesArgs),
    /// Train one model on a whole dataset
    Train(TrainArgs),
    /// k-fold cross-validation on a dataset
    Cv(CvArgs),
    /// Predict (SBP, DBP) for every sample of a dataset
    Predict(PredictArgs),
    /// Metrics, AAMI/BHS checks and Bland-Altman data for a predictions CSV
    Evaluate(EvaluateArgs),
    /// End to end: synthesize or ingest, preprocess, segment, features, cv, evaluate
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output record CSV; with --cohort, the output directory
    #[arg(long)]
    out: PathBuf,
    /// Write the config's synthetic cohort instead of a single record [default: off]
    #[arg(long)]
    cohort: bool,
    /// Record duration in seconds
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Heart rate in beats per minute
    #[arg(long, default_value_t = 60.0)]
    hr: f64,
    /// Systolic pressure in mmHg
    #[arg(long, default_value_t = 120.0)]
    sbp: f64,
    /// Diastolic pressure in mmHg
    #[arg(long, default_value_t = 80.0)]
    dbp: f64,
    /// Standard deviation of the white PPG noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Relative height of the dicrotic lobe
    #[arg(long, default_value_t = 0.4)]
    notch_depth: f64,
    /// Amplitude of the 0.2 Hz baseline drift
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    /// Sampling rate in Hz
    #[arg(long, default_value_t = pulsebp_core::DEFAULT_FS)]
    fs: f64,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Input record CSV (its .meta.json sidecar must sit beside it)
    #[arg(long = "in")]
    input: PathBuf,
    /// Output record CSV; the cleaning report goes to <out>.cleaning.json
    #[arg(long)]
    out: PathBuf,
    /// Minimum record duration in seconds [default: 900]
    #[arg(long)]
    min_duration: Option<f64>,
    /// Bandpass lower cut-off in Hz [default: 0.7]
    #[arg(long)]
    f_low: Option<f64>,
    /// Bandpass upper cut-off in Hz [default: 10]
    #[arg(long)]
    f_high: Option<f64>,
    /// Butterworth order [default: 5]
    #[arg(long)]
    order: Option<usize>,
    /// Moving-average window in samples [default: 5]
    #[arg(long)]
    maf_window: Option<usize>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Preprocessed record CSV
    #[arg(long = "in")]
    input: PathBuf,
    /// Output cycles JSON
    #[arg(long)]
    out: PathBuf,
    /// Minimum distance between SDPPG peaks in seconds [default: 0.3]
    #[arg(long)]
    min_distance: Option<f64>,
    /// Quality-gate frame length in seconds [default: 10]
    #[arg(long)]
    frame_len: Option<f64>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    /// Cycles JSON from `segment`
    #[arg(long)]
    cycles: PathBuf,
    /// The preprocessed record the cycles were taken from
    #[arg(long)]
    record: PathBuf,
    /// Output dataset
    #[arg(long)]
    out: PathBuf,
    /// Output format
    #[arg(long, value_enum, default_value_t = DatasetFormat::Bin)]
    format: DatasetFormat,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Training epochs [default: 400]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file from `features`
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoint, norm sidecar and loss curve
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct CvArgs {
    /// Dataset file from `features`
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for fold results, predictions and cv_report.json
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    /// Folds trained concurrently [default: 1]
    #[arg(long)]
    parallel_folds: Option<usize>,
    /// Fold unit [default: sample]
    #[arg(long, value_enum)]
    group_by: Option<GroupByArg>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum GroupByArg {
    Sample,
    Subject,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint file; its .norm.json sidecar must sit beside it
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file from `features`
    #[arg(long)]
    dataset: PathBuf,
    /// Output predictions CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions CSV (sample_id, true_sbp, true_dbp, pred_sbp, pred_dbp)
    #[arg(long)]
    predictions: PathBuf,
    /// Output directory for report.json and plot data
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of distinct records behind the predictions, for the AAMI sample-size rule
    #[arg(long, default_value_t = 0)]
    records: usize,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Output directory [default: the config's out_dir]
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Generate the config's synthetic cohort as input [default: off]
    #[arg(long, conflicts_with = "input")]
    synthetic: bool,
    /// Directory of record CSV files to ingest
    #[arg(long)]
    input: Option<PathBuf>,
    /// Folds trained concurrently [default: 1]
    #[arg(long)]
    parallel_folds: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut PipelineConfig, f: &TrainFlags) {
    if let Some(v) = f.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.train.lr = v;
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::new(ErrorKind::Usage, msg).into()
}

fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(anyhow::Error::new(Failure::new(ErrorKind::Data, "input file not found")).context(AtPath(path.to_path_buf())))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            if a.cohort {
                cfg.validate()?;
                let paths = stages::synth_cohort(&cfg.cohort, cfg.seed, &a.out)?;
                log::info!("wrote {} records to {}", paths.len(), a.out.display());
            } else {
                let sc = SynthConfig {
                    duration_s: a.duration,
                    heart_rate_bpm: a.hr,
                    sbp_mmhg: a.sbp,
                    dbp_mmhg: a.dbp,
                    notch_depth: a.notch_depth,
                    noise_std: a.noise,
                    baseline_drift_amp: a.drift,
                    seed: cfg.seed,
                    fs: a.fs,
                };
                stages::synth_record(&sc, &a.out)?;
            }
        }
        Command::Preprocess(a) => {
            require_input(&a.input)?;
            if let Some(v) = a.min_duration {
                cfg.cleaning.min_duration_s = v;
            }
            if let Some(v) = a.f_low {
                cfg.filter.f_low = v;
            }
            if let Some(v) = a.f_high {
                cfg.filter.f_high = v;
            }
            if let Some(v) = a.order {
                cfg.filter.order = v;
            }
            if let Some(v) = a.maf_window {
                cfg.filter.maf_window = v;
            }
            let report = stages::preprocess_file(&a.input, &a.out, &cfg.cleaning, &cfg.filter)?;
            log::info!("kept {} segments", report.kept_segments.len());
        }
        Command::Segment(a) => {
            require_input(&a.input)?;
            if let Some(v) = a.min_distance {
                cfg.segment.min_distance_s = v;
            }
            if let Some(v) = a.frame_len {
                cfg.segment.quality.frame_len_s = v;
            }
            let cycles = stages::segment_file(&a.input, &a.out, &cfg.segment)?;
            log::info!("{} cycles", cycles.len());
        }
        Command::Features(a) => {
            require_input(&a.cycles)?;
            require_input(&a.record)?;
            let d = stages::features_file(&a.cycles, &a.record, &a.out, &cfg.segment.quality, a.format)?;
            log::info!("{} samples", d.len());
        }
        Command::Train(a) => {
            require_input(&a.dataset)?;
            apply_train_flags(&mut cfg, &a.flags);
            cfg.validate()?;
            let ck = stages::train_dataset(&a.dataset, &a.out_dir, &cfg)?;
            log::info!("checkpoint written to {}", ck.display());
        }
        Command::Cv(a) => {
            require_input(&a.dataset)?;
            apply_train_flags(&mut cfg, &a.flags);
            if let Some(v) = a.folds {
                cfg.train.folds = v;
            }
            if let Some(v) = a.parallel_folds {
                cfg.parallel_folds = v;
            }
            if let Some(g) = a.group_by {
                cfg.train.group_by = match g {
                    GroupByArg::Sample => GroupBy::Sample,
                    GroupByArg::Subject => GroupBy::Subject,
                };
            }
            cfg.validate()?;
            let cv = stages::cv_dataset(&a.dataset, &a.out_dir, &cfg)?;
            log::info!(
                "mean test MAE: SBP {:.3}, DBP {:.3} mmHg",
                cv.aggregate.mean_sbp.mae,
                cv.aggregate.mean_dbp.mae
            );
        }
        Command::Predict(a) => {
            require_input(&a.checkpoint)?;
            require_input(&a.dataset)?;
            let n = stages::predict_file(&a.checkpoint, &a.dataset, &a.out)?;
            log::info!("{n} predictions");
        }
        Command::Evaluate(a) => {
            require_input(&a.predictions)?;
            stages::evaluate_file(&a.predictions, a.records, &a.out_dir)?;
        }
        Command::Pipeline(a) => {
            if let Some(v) = a.parallel_folds {
                cfg.parallel_folds = v;
            }
            let source = match (a.synthetic, a.input) {
                (true, _) => Source::Synthetic,
                (false, Some(dir)) => {
                    require_input(&dir)?;
                    Source::Directory(dir)
                }
                (false, None) => return Err(usage("pipeline needs --synthetic or --input <dir>")),
            };
            let out = a.out_dir.or_else(|| cfg.out_dir.clone()).ok_or_else(|| usage("pipeline needs --out-dir"))?;
            let summary = stages::run_pipeline(&cfg, &source, &out).context("pipeline")?;
            log::info!("{} samples; report in {}", summary.samples, out.join("report").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string().trim().to_string();
            let report = ErrorReport { error: ErrorKind::Usage, path: None, message };
            eprintln!("{}", report.to_json());
            return ExitCode::from(ErrorKind::Usage.exit_code());
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let report = ErrorReport::from_error(&err);
            eprintln!("{}", report.to_json());
            ExitCode::from(report.error.exit_code())
        }
    }
}
