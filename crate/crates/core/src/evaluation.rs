//! Accuracy metrics, AAMI/BHS standards, Bland-Altman agreement and the
//! report files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_SCHEMA: &str = "pf-report-v1";
pub const HIST_BIN_MMHG: f64 = 0.5;
pub const CUM_THRESHOLDS: [f64; 3] = [5.0, 10.0, 15.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("targets have zero variance; R² is undefined")]
    ZeroVarianceTargets,
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("invalid cumulative percentages {0:?}")]
    InvalidPercentages([f64; 3]),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_pair(t: &[f64], p: &[f64]) -> Result<(), EvalError> {
    if t.len() != p.len() {
        return Err(EvalError::LengthMismatch(t.len(), p.len()));
    }
    if t.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if t.iter().chain(p).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// Error statistics with errors taken as `target - prediction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub me: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Population standard deviation of the errors.
    pub std: f64,
}

pub fn metrics(targets: &[f64], predictions: &[f64]) -> Result<Metrics, EvalError> {
    check_pair(targets, predictions)?;
    let n = targets.len() as f64;
    let errors: Vec<f64> = targets.iter().zip(predictions).map(|(t, p)| t - p).collect();
    let me = errors.iter().sum::<f64>() / n;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let sse: f64 = errors.iter().map(|e| e * e).sum();
    let rmse = (sse / n).sqrt();
    let std = (errors.iter().map(|e| (e - me).powi(2)).sum::<f64>() / n).sqrt();
    let t_mean = targets.iter().sum::<f64>() / n;
    let sst: f64 = targets.iter().map(|t| (t - t_mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(EvalError::ZeroVarianceTargets);
    }
    Ok(Metrics { r2: 1.0 - sse / sst, me, mae, rmse, std })
}

/// Percentages of absolute errors strictly below each threshold.
pub fn cumulative_error_pct(targets: &[f64], predictions: &[f64], thresholds: [f64; 3]) -> Result<[f64; 3], EvalError> {
    check_pair(targets, predictions)?;
    let n = targets.len() as f64;
    Ok(thresholds.map(|th| {
        let below = targets.iter().zip(predictions).filter(|(t, p)| (*t - *p).abs() < th).count();
        100.0 * below as f64 / n
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AamiClause {
    Records,
    Me,
    Std,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AamiResult {
    pub records: usize,
    pub pass: bool,
    pub reasons: Vec<AamiClause>,
}

/// Passes when more than 85 records were used, |ME| < 5 and STD < 8 mmHg.
pub fn aami_check(records: usize, me: f64, std: f64) -> AamiResult {
    let mut reasons = Vec::new();
    if records <= 85 {
        reasons.push(AamiClause::Records);
    }
    if !(me.abs() < 5.0) {
        reasons.push(AamiClause::Me);
    }
    if !(std < 8.0) {
        reasons.push(AamiClause::Std);
    }
    AamiResult { records, pass: reasons.is_empty(), reasons }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BhsGrade {
    A,
    B,
    C,
    Fail,
}

const BHS_TABLE: [(BhsGrade, [f64; 3]); 3] = [
    (BhsGrade::A, [60.0, 85.0, 95.0]),
    (BhsGrade::B, [50.0, 75.0, 90.0]),
    (BhsGrade::C, [40.0, 65.0, 85.0]),
];

/// Best grade whose three thresholds are all met.
pub fn bhs_grade(cum: [f64; 3]) -> Result<BhsGrade, EvalError> {
    let in_range = cum.iter().all(|v| (0.0..=100.0).contains(v));
    if !in_range || cum[0] > cum[1] || cum[1] > cum[2] {
        return Err(EvalError::InvalidPercentages(cum));
    }
    Ok(BHS_TABLE
        .iter()
        .find(|(_, req)| cum.iter().zip(req).all(|(c, r)| c >= r))
        .map_or(BhsGrade::Fail, |(g, _)| *g))
}

/// Differences taken as `prediction - target`; limits use the sample SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// `((T + P) / 2, P - T)` per sample.
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
}

pub fn bland_altman(targets: &[f64], predictions: &[f64]) -> Result<BlandAltman, EvalError> {
    check_pair(targets, predictions)?;
    if targets.len() < 2 {
        return Err(EvalError::TooFewSamples { n: targets.len(), min: 2 });
    }
    let pairs: Vec<(f64, f64)> = targets.iter().zip(predictions).map(|(t, p)| ((t + p) / 2.0, p - t)).collect();
    let n = pairs.len() as f64;
    let mean_diff = pairs.iter().map(|(_, d)| d).sum::<f64>() / n;
    let sd = (pairs.iter().map(|(_, d)| (d - mean_diff).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman { mean_diff, sd, loa_low: mean_diff - 1.96 * sd, loa_high: mean_diff + 1.96 * sd, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Histogram of `target - prediction` with fixed-width bins aligned to 0.
pub fn error_histogram(targets: &[f64], predictions: &[f64], width: f64) -> Result<Vec<HistBin>, EvalError> {
    check_pair(targets, predictions)?;
    let idx: Vec<i64> = targets.iter().zip(predictions).map(|(t, p)| ((t - p) / width).floor() as i64).collect();
    let lo = *idx.iter().min().expect("non-empty");
    let hi = *idx.iter().max().expect("non-empty");
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for i in idx {
        counts[(i - lo) as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| {
            let b = lo + k as i64;
            HistBin { bin_low: b as f64 * width, bin_high: (b + 1) as f64 * width, count }
        })
        .collect())
}

/// Everything reported for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub r2: f64,
    #[serde(rename = "me_mmHg")]
    pub me: f64,
    #[serde(rename = "mae_mmHg")]
    pub mae: f64,
    #[serde(rename = "rmse_mmHg")]
    pub rmse: f64,
    #[serde(rename = "std_mmHg")]
    pub std: f64,
    pub cum_pct_5: f64,
    pub cum_pct_10: f64,
    pub cum_pct_15: f64,
    pub aami: AamiResult,
    pub bhs_grade: BhsGrade,
    pub bland_altman: BlandAltman,
    pub histogram: Vec<HistBin>,
    /// `(target, prediction)` per sample, written to the CSV files only.
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
}

impl ChannelReport {
    pub fn compute(targets: &[f64], predictions: &[f64], records: usize) -> Result<Self, EvalError> {
        let m = metrics(targets, predictions)?;
        let cum = cumulative_error_pct(targets, predictions, CUM_THRESHOLDS)?;
        Ok(Self {
            r2: m.r2,
            me: m.me,
            mae: m.mae,
            rmse: m.rmse,
            std: m.std,
            cum_pct_5: cum[0],
            cum_pct_10: cum[1],
            cum_pct_15: cum[2],
            aami: aami_check(records, m.me, m.std),
            bhs_grade: bhs_grade(cum)?,
            bland_altman: bland_altman(targets, predictions)?,
            histogram: error_histogram(targets, predictions, HIST_BIN_MMHG)?,
            pairs: targets.iter().copied().zip(predictions.iter().copied()).collect(),
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { r2: self.r2, me: self.me, mae: self.mae, rmse: self.rmse, std: self.std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub n: usize,
    pub records: usize,
    pub sbp: ChannelReport,
    pub dbp: ChannelReport,
}

/// Builds the report from `(sbp, dbp)` targets and predictions.
pub fn evaluate(targets: &[(f64, f64)], predictions: &[(f64, f64)], records: usize) -> Result<EvalReport, EvalError> {
    if targets.len() != predictions.len() {
        return Err(EvalError::LengthMismatch(targets.len(), predictions.len()));
    }
    let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
    let (ts, td) = split(targets);
    let (ps, pd) = split(predictions);
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        n: targets.len(),
        records,
        sbp: ChannelReport::compute(&ts, &ps, records)?,
        dbp: ChannelReport::compute(&td, &pd, records)?,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

fn csv_rows<I: IntoIterator<Item = String>>(header: &str, rows: I) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Writes `report.json` and the per-channel plot-data CSVs into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<(), EvalError> {
    if report.n == 0 {
        return Err(EvalError::EmptyInput);
    }
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io { path: out_dir.to_path_buf(), source })?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_file(&out_dir.join("report.json"), &json)?;
    for (name, ch) in [("sbp", &report.sbp), ("dbp", &report.dbp)] {
        write_file(
            &out_dir.join(format!("error_hist_{name}.csv")),
            &csv_rows("bin_low,bin_high,count", ch.histogram.iter().map(|b| format!("{},{},{}", b.bin_low, b.bin_high, b.count))),
        )?;
        write_file(
            &out_dir.join(format!("scatter_{name}.csv")),
            &csv_rows("true,predicted", ch.pairs.iter().map(|(t, p)| format!("{t},{p}"))),
        )?;
        write_file(
            &out_dir.join(format!("residuals_{name}.csv")),
            &csv_rows("true,residual", ch.pairs.iter().map(|(t, p)| format!("{t},{}", t - p))),
        )?;
        write_file(
            &out_dir.join(format!("bland_altman_{name}.csv")),
            &csv_rows("mean,diff", ch.bland_altman.pairs.iter().map(|(m, d)| format!("{m},{d}"))),
        )?;
    }
    Ok(())
}
