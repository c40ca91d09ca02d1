//! One function per pipeline stage, each reading and writing files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use pulsebp_core::evaluation::{emit_report, evaluate, EvalReport};
use pulsebp_core::features::{
    read_dataset, record_samples, write_dataset, write_dataset_csv, Dataset, NormStats, SEQ_LEN,
};
use pulsebp_core::preprocess::{preprocess_chain, CleaningPolicy, CleaningReport, FilterConfig, PreprocessError};
use pulsebp_core::segmentation::{segment_record, CycleRecord, FrameQualityPolicy, SegmentConfig};
use pulsebp_core::waveform::{read_record, synthesize, synthesize_cohort, write_record, CohortConfig, SynthConfig};
use pulsebp_model::training::{
    cross_validate, norm_sidecar, persist_outcome, predict_samples, report_for, train_model, CvAggregate, CvResult,
    Prediction, TrainConfig,
};
use pulsebp_model::{load_params, ModelConfig};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{AtPath, ErrorKind, Failure};

fn at(path: &Path) -> AtPath {
    AtPath(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).context(at(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).context(at(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum DatasetFormat {
    #[default]
    Bin,
    Csv,
}

pub fn synth_record(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let record = synthesize(cfg).map_err(|e| Failure::new(ErrorKind::Validation, e.to_string()))?;
    write_record(&record, out).context(at(out))
}

/// Writes every cohort record as `<dir>/<record_id>.csv`; returns the paths.
pub fn synth_cohort(cfg: &CohortConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let records = synthesize_cohort(cfg, seed).map_err(|e| Failure::new(ErrorKind::Validation, e.to_string()))?;
    create_dir(dir)?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.csv", r.record_id()));
            write_record(r, &path).context(at(&path))?;
            Ok(path)
        })
        .collect()
}

/// Path of the cleaning report written beside a preprocessed record.
pub fn cleaning_report_path(out: &Path) -> PathBuf {
    out.with_extension("cleaning.json")
}

/// Cleans and filters one record. The cleaning report is written even when
/// the record is rejected.
pub fn preprocess_file(input: &Path, out: &Path, policy: &CleaningPolicy, filter: &FilterConfig) -> Result<CleaningReport> {
    let record = read_record(input).context(at(input))?;
    let report_path = cleaning_report_path(out);
    match preprocess_chain(&record, policy, filter) {
        Ok(p) => {
            write_record(&p.record, out).context(at(out))?;
            write_text(&report_path, &to_json(&p.report))?;
            Ok(p.report)
        }
        Err(PreprocessError::Rejected(reason)) => {
            let report = CleaningReport::new(record.record_id(), &Err(reason.clone()));
            write_text(&report_path, &to_json(&report))?;
            Err(anyhow::Error::new(PreprocessError::Rejected(reason)).context(at(input)))
        }
        Err(e) => Err(anyhow::Error::new(e).context(at(input))),
    }
}

pub fn segment_file(input: &Path, out: &Path, cfg: &SegmentConfig) -> Result<Vec<CycleRecord>> {
    let record = read_record(input).context(at(input))?;
    let cycles = segment_record(&record, cfg).context(at(input))?;
    write_text(out, &to_json(&cycles))?;
    Ok(cycles)
}

pub fn read_cycles(path: &Path) -> Result<Vec<CycleRecord>> {
    let text = std::fs::read_to_string(path).context(at(path))?;
    serde_json::from_str(&text).context(at(path))
}

pub fn features_file(
    cycles: &Path,
    record: &Path,
    out: &Path,
    quality: &FrameQualityPolicy,
    format: DatasetFormat,
) -> Result<Dataset> {
    let rec = read_record(record).context(at(record))?;
    let cyc = read_cycles(cycles)?;
    let samples = record_samples(&rec, &cyc, quality, SEQ_LEN).context(at(cycles))?;
    let dataset = Dataset::new(SEQ_LEN, samples).context(at(record))?;
    write_dataset_any(&dataset, out, format)?;
    Ok(dataset)
}

fn write_dataset_any(dataset: &Dataset, out: &Path, format: DatasetFormat) -> Result<()> {
    match format {
        DatasetFormat::Bin => write_dataset(dataset, out),
        DatasetFormat::Csv => write_dataset_csv(dataset, out),
    }
    .context(at(out))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let d = read_dataset(path).context(at(path))?;
    if d.is_empty() {
        return Err(anyhow::Error::new(Failure::new(ErrorKind::Data, "dataset holds no samples")).context(at(path)));
    }
    Ok(d)
}

/// Trains on the whole dataset; writes checkpoint, norm sidecar, loss curve
/// and the effective config into `out_dir`.
pub fn train_dataset(dataset: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<PathBuf> {
    let data = load_dataset(dataset)?;
    let eff = cfg.effective();
    info!("training on {} samples for {} epochs", data.len(), eff.train.epochs);
    let outcome = train_model(data.samples(), &[], &eff.model, &eff.train, 0)?;
    let ck = persist_outcome(&outcome, out_dir)?;
    write_text(&out_dir.join("config.json"), &eff.to_json())?;
    Ok(ck)
}

#[derive(Debug, Serialize)]
struct FoldSummary<'a> {
    fold_id: usize,
    train_size: usize,
    test_size: usize,
    initial_train_mse: f64,
    final_train_mse: Option<f64>,
    final_test_mse: Option<f64>,
    report: &'a EvalReport,
}

#[derive(Debug, Serialize)]
struct CvReportFile<'a> {
    seed: u64,
    folds: Vec<FoldSummary<'a>>,
    aggregate: &'a CvAggregate,
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).context(at(path))?;
    for p in preds {
        w.serialize(p).context(at(path))?;
    }
    w.flush().context(at(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).context(at(path))?;
    r.deserialize().collect::<Result<Vec<Prediction>, _>>().context(at(path))
}

/// k-fold cross-validation over a dataset already in memory. Writes fold
/// directories, `cv_report.json`, `predictions.csv` and `config.json`.
pub fn cv_samples(data: &Dataset, out_dir: &Path, model: &ModelConfig, train: &TrainConfig, parallel: usize) -> Result<CvResult> {
    create_dir(out_dir)?;
    info!("{}-fold cross-validation on {} samples", train.folds, data.len());
    let cv = cross_validate(data.samples(), model, train, Some(out_dir), parallel)?;
    let folds = cv
        .folds
        .iter()
        .map(|f| FoldSummary {
            fold_id: f.fold_id,
            train_size: f.train_indices.len(),
            test_size: f.test_indices.len(),
            initial_train_mse: f.initial_train_mse,
            final_train_mse: f.loss_curve.last().map(|e| e.train_mse),
            final_test_mse: f.loss_curve.last().and_then(|e| e.test_mse),
            report: &f.metrics,
        })
        .collect();
    let file = CvReportFile { seed: train.seed, folds, aggregate: &cv.aggregate };
    write_text(&out_dir.join("cv_report.json"), &to_json(&file))?;
    write_predictions(&cv.predictions, &out_dir.join("predictions.csv"))?;
    Ok(cv)
}

pub fn cv_dataset(dataset: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<CvResult> {
    let data = load_dataset(dataset)?;
    let eff = cfg.effective();
    let cv = cv_samples(&data, out_dir, &eff.model, &eff.train, cfg.parallel_folds)?;
    write_text(&out_dir.join("config.json"), &eff.to_json())?;
    Ok(cv)
}

/// Eval-mode predictions for every dataset sample; returns the row count.
pub fn predict_file(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<usize> {
    let (params, _) = load_params(checkpoint, None).context(at(checkpoint))?;
    let norm_path = norm_sidecar(checkpoint);
    let text = std::fs::read_to_string(&norm_path).context(at(&norm_path))?;
    let norm: NormStats = serde_json::from_str(&text).context(at(&norm_path))?;
    let data = load_dataset(dataset)?;
    let preds = predict_samples(&params, &norm, data.samples())?;
    write_predictions(&preds, out)?;
    Ok(preds.len())
}

pub fn evaluate_predictions(preds: &[Prediction], records: usize, out_dir: &Path) -> Result<EvalReport> {
    let t: Vec<(f64, f64)> = preds.iter().map(|p| (p.true_sbp, p.true_dbp)).collect();
    let p: Vec<(f64, f64)> = preds.iter().map(|p| (p.pred_sbp, p.pred_dbp)).collect();
    let report = evaluate(&t, &p, records)?;
    emit_report(&report, out_dir).context(at(out_dir))?;
    Ok(report)
}

pub fn evaluate_file(predictions: &Path, records: usize, out_dir: &Path) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    evaluate_predictions(&preds, records, out_dir).context(at(predictions))
}

/// Where the pipeline takes its records from.
#[derive(Debug, Clone)]
pub enum Source {
    Synthetic,
    /// A directory of record CSV files (with sidecars).
    Directory(PathBuf),
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordSummary {
    pub record_id: String,
    pub rejected: bool,
    pub reason: Option<String>,
    pub cycles: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub records: Vec<RecordSummary>,
    pub samples: usize,
    /// Written separately to `report/report.json`.
    #[serde(skip)]
    pub report: EvalReport,
}

fn list_records(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .context(at(dir))?
        .map(|e| e.map(|e| e.path()).context(at(dir)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    paths.sort();
    Ok(paths)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// synth-or-ingest → preprocess → segment → features → cv → evaluate.
///
/// Rejected records are skipped and listed in `summary.json`. The output
/// tree holds no timestamps or absolute paths, so two runs with the same
/// inputs and seed are byte-identical.
pub fn run_pipeline(cfg: &PipelineConfig, source: &Source, out_dir: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let eff = cfg.effective();
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.json"), &eff.to_json())?;

    let inputs = match source {
        Source::Synthetic => {
            info!("synthesizing {} records", cfg.cohort.records);
            synth_cohort(&cfg.cohort, cfg.seed, &out_dir.join("raw"))?
        }
        Source::Directory(dir) => list_records(dir)?,
    };
    if inputs.is_empty() {
        return Err(Failure::new(ErrorKind::Data, "no input records").into());
    }

    let (clean_dir, cycles_dir) = (out_dir.join("clean"), out_dir.join("cycles"));
    create_dir(&clean_dir)?;
    create_dir(&cycles_dir)?;
    let mut parts = Vec::new();
    let mut summaries = Vec::new();
    for input in &inputs {
        let stem = file_stem(input);
        let clean = clean_dir.join(format!("{stem}.csv"));
        let report = match preprocess_file(input, &clean, &cfg.cleaning, &cfg.filter) {
            Ok(r) => r,
            Err(e) if e.chain().any(|c| matches!(c.downcast_ref::<PreprocessError>(), Some(PreprocessError::Rejected(_)))) => {
                warn!("{stem}: {e:#}");
                summaries.push(RecordSummary {
                    record_id: stem,
                    rejected: true,
                    reason: Some(format!("{e:#}")),
                    cycles: 0,
                    samples: 0,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let cycles_path = cycles_dir.join(format!("{stem}.cycles.json"));
        let cycles = segment_file(&clean, &cycles_path, &cfg.segment)?;
        let rec = read_record(&clean).context(at(&clean))?;
        let samples = record_samples(&rec, &cycles, &cfg.segment.quality, SEQ_LEN).context(at(&cycles_path))?;
        info!("{stem}: {} cycles, {} samples", cycles.len(), samples.len());
        summaries.push(RecordSummary {
            record_id: report.record_id,
            rejected: false,
            reason: None,
            cycles: cycles.len(),
            samples: samples.len(),
        });
        parts.push(samples);
    }

    let dataset = Dataset::from_parts(SEQ_LEN, parts)?;
    write_dataset(&dataset, &out_dir.join("dataset.bin")).context(at(&out_dir.join("dataset.bin")))?;
    if dataset.len() < eff.train.folds {
        return Err(Failure::new(
            ErrorKind::Data,
            format!("only {} samples for {} folds", dataset.len(), eff.train.folds),
        )
        .into());
    }
    let cv = cv_samples(&dataset, &out_dir.join("cv"), &eff.model, &eff.train, cfg.parallel_folds)?;
    let report = report_for(dataset.samples(), &cv.predictions)?;
    emit_report(&report, &out_dir.join("report")).context(at(&out_dir.join("report")))?;

    let summary = PipelineSummary { seed: cfg.seed, records: summaries, samples: dataset.len(), report };
    write_text(&out_dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}
