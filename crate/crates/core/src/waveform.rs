//! Waveform records: the in-memory model, the on-disk format and a synthetic
//! PPG/ABP generator.
//!
//! A record lives on disk as two files sharing a stem:
//!
//! * `<record_id>.csv` with header `t,ppg` or `t,ppg,abp`, one row per sample,
//!   `t` in seconds from the record start (step `1/fs`);
//! * `<record_id>.meta.json` with `record_id`, `subject_id`, `fs`,
//!   `start_time` and, for preprocessed records, the kept `segments`.
//!
//! Samples are written with Rust's shortest round-trip float formatting, so a
//! write followed by a read reproduces every sample bit-for-bit.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DEFAULT_FS;

/// Tolerance on the spacing of the `t` column.
pub const TIME_STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("non-finite {channel} sample at index {index}")]
    NonFiniteSample { channel: &'static str, index: usize },
    #[error("abp has {abp} samples but ppg has {ppg}")]
    LengthMismatch { ppg: usize, abp: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A half-open sample range `[start, end)` of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 2]> for Segment {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Segment> for [usize; 2] {
    fn from(s: Segment) -> Self {
        [s.start, s.end]
    }
}

/// A validated PPG (and optionally ABP) recording.
///
/// Records are immutable once built; every constructor checks the invariants
/// (positive `fs`, non-empty finite PPG, ABP aligned sample-for-sample).
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    record_id: String,
    subject_id: String,
    fs: f64,
    ppg: Vec<f64>,
    abp: Option<Vec<f64>>,
    start_time: Option<String>,
    segments: Option<Vec<Segment>>,
}

impl Record {
    pub fn new(
        record_id: impl Into<String>,
        subject_id: impl Into<String>,
        fs: f64,
        ppg: Vec<f64>,
        abp: Option<Vec<f64>>,
    ) -> Result<Self, RecordError> {
        let record = Self {
            record_id: record_id.into(),
            subject_id: subject_id.into(),
            fs,
            ppg,
            abp,
            start_time: None,
            segments: None,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn with_start_time(mut self, start_time: Option<String>) -> Self {
        self.start_time = start_time;
        self
    }

    /// Attaches the kept-segment layout produced by preprocessing.
    pub fn with_segments(mut self, segments: Option<Vec<Segment>>) -> Result<Self, RecordError> {
        self.segments = segments;
        self.validate()?;
        Ok(self)
    }

    pub fn with_ids(mut self, record_id: impl Into<String>, subject_id: impl Into<String>) -> Self {
        self.record_id = record_id.into();
        self.subject_id = subject_id.into();
        self
    }

    fn validate(&self) -> Result<(), RecordError> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(RecordError::InvalidRecord(format!("fs must be positive, got {}", self.fs)));
        }
        if self.ppg.is_empty() {
            return Err(RecordError::InvalidRecord("ppg is empty".into()));
        }
        if let Some(i) = self.ppg.iter().position(|v| !v.is_finite()) {
            return Err(RecordError::NonFiniteSample { channel: "ppg", index: i });
        }
        if let Some(abp) = &self.abp {
            if abp.len() != self.ppg.len() {
                return Err(RecordError::LengthMismatch { ppg: self.ppg.len(), abp: abp.len() });
            }
            if let Some(i) = abp.iter().position(|v| !v.is_finite()) {
                return Err(RecordError::NonFiniteSample { channel: "abp", index: i });
            }
        }
        if let Some(segments) = &self.segments {
            let mut prev_end = 0;
            for s in segments {
                if s.start < prev_end || s.end <= s.start || s.end > self.ppg.len() {
                    return Err(RecordError::InvalidRecord(format!(
                        "segment [{}, {}) is empty, unordered or out of range",
                        s.start, s.end
                    )));
                }
                prev_end = s.end;
            }
        }
        Ok(())
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn ppg(&self) -> &[f64] {
        &self.ppg
    }

    pub fn abp(&self) -> Option<&[f64]> {
        self.abp.as_deref()
    }

    pub fn start_time(&self) -> Option<&str> {
        self.start_time.as_deref()
    }

    pub fn segments(&self) -> Option<&[Segment]> {
        self.segments.as_deref()
    }

    /// Kept segments, or one segment spanning the whole record when no layout
    /// is attached.
    pub fn segments_or_whole(&self) -> Vec<Segment> {
        match &self.segments {
            Some(s) => s.clone(),
            None => vec![Segment::new(0, self.len())],
        }
    }

    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.ppg.len() as f64 / self.fs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    record_id: String,
    subject_id: String,
    fs: f64,
    start_time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<Segment>>,
}

/// Path of the JSON sidecar belonging to a record CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RecordError + '_ {
    move |source| RecordError::Io { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, reason: impl Into<String>) -> RecordError {
    RecordError::MalformedFile { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads `<stem>.csv` and its `<stem>.meta.json` sidecar.
pub fn read_record(path: &Path) -> Result<Record, RecordError> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: RecordMeta =
        serde_json::from_str(&meta_text).map_err(|e| malformed(&meta_path, e.to_string()))?;
    if !(meta.fs.is_finite() && meta.fs > 0.0) {
        return Err(malformed(&meta_path, format!("fs must be positive, got {}", meta.fs)));
    }

    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = reader.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    let columns: Vec<&str> = headers.iter().map(str::trim).collect();
    let has_abp = match columns.as_slice() {
        ["t", "ppg"] => false,
        ["t", "ppg", "abp"] => true,
        _ => return Err(malformed(path, format!("unexpected header {columns:?}"))),
    };

    let step = 1.0 / meta.fs;
    let mut ppg = Vec::new();
    let mut abp = Vec::new();
    let mut abp_ended_at: Option<usize> = None;
    let mut prev_t: Option<f64> = None;
    for (row, result) in reader.records().enumerate() {
        let rec = result.map_err(|e| malformed(path, e.to_string()))?;
        let width = rec.len();
        if width < 2 || width > columns.len() {
            return Err(malformed(path, format!("row {row} has {width} columns")));
        }
        let parse = |i: usize, name: &str| -> Result<f64, RecordError> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| malformed(path, format!("row {row}: bad {name} value {:?}", &rec[i])))
        };
        let t = parse(0, "t")?;
        if let Some(p) = prev_t {
            if !((t - p) - step).abs().le(&TIME_STEP_TOLERANCE) {
                return Err(malformed(path, format!("row {row}: time step {} != 1/fs", t - p)));
            }
        }
        prev_t = Some(t);
        let v = parse(1, "ppg")?;
        if !v.is_finite() {
            return Err(RecordError::NonFiniteSample { channel: "ppg", index: row });
        }
        ppg.push(v);

        if has_abp {
            let present = width == 3 && !rec[2].trim().is_empty();
            match (present, abp_ended_at) {
                (true, Some(_)) => {
                    return Err(malformed(path, format!("row {row}: abp resumes after a gap")));
                }
                (true, None) => {
                    let a = parse(2, "abp")?;
                    if !a.is_finite() {
                        return Err(RecordError::NonFiniteSample { channel: "abp", index: row });
                    }
                    abp.push(a);
                }
                (false, None) => abp_ended_at = Some(row),
                (false, Some(_)) => {}
            }
        } else if width != 2 {
            return Err(malformed(path, format!("row {row} has {width} columns")));
        }
    }
    if has_abp && abp.len() != ppg.len() {
        return Err(RecordError::LengthMismatch { ppg: ppg.len(), abp: abp.len() });
    }
    if let Some(n) = meta.n_samples {
        if n != ppg.len() {
            return Err(malformed(path, format!("sidecar says {n} samples, file has {}", ppg.len())));
        }
    }
    if ppg.is_empty() {
        return Err(malformed(path, "no samples"));
    }

    let record = Record::new(meta.record_id, meta.subject_id, meta.fs, ppg, has_abp.then_some(abp))?
        .with_start_time(meta.start_time);
    record.with_segments(meta.segments)
}

/// Writes `record` to `path` (the CSV) plus the sidecar next to it.
pub fn write_record(record: &Record, path: &Path) -> Result<(), RecordError> {
    record.validate()?;
    let mut out = String::with_capacity(record.len() * 32);
    out.push_str(if record.abp.is_some() { "t,ppg,abp\n" } else { "t,ppg\n" });
    for (i, &v) in record.ppg.iter().enumerate() {
        let t = i as f64 / record.fs;
        match &record.abp {
            Some(abp) => out.push_str(&format!("{t},{v},{}\n", abp[i])),
            None => out.push_str(&format!("{t},{v}\n")),
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))?;

    let meta = RecordMeta {
        record_id: record.record_id.clone(),
        subject_id: record.subject_id.clone(),
        fs: record.fs,
        start_time: record.start_time.clone(),
        n_samples: Some(record.len()),
        segments: record.segments.clone(),
    };
    let meta_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("record metadata serializes");
    fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))
}

// Synthetic pulse geometry, in fractions of the cardiac period.
/// Centre of the systolic lobe.
pub const SYSTOLIC_PHASE: f64 = 0.30;
/// Centre of the dicrotic lobe.
pub const DICROTIC_PHASE: f64 = 0.65;
/// Standard deviation of the systolic lobe.
pub const SYSTOLIC_WIDTH: f64 = 0.12;
/// Standard deviation of the dicrotic lobe.
pub const DICROTIC_WIDTH: f64 = 0.10;
/// Frequency of the sinusoidal baseline drift, Hz.
pub const DRIFT_HZ: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub heart_rate_bpm: f64,
    #[serde(rename = "sbp_mmHg")]
    pub sbp_mmhg: f64,
    #[serde(rename = "dbp_mmHg")]
    pub dbp_mmhg: f64,
    pub notch_depth: f64,
    pub noise_std: f64,
    pub baseline_drift_amp: f64,
    pub seed: u64,
    #[serde(default = "default_fs")]
    pub fs: f64,
}

fn default_fs() -> f64 {
    DEFAULT_FS
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            heart_rate_bpm: 60.0,
            sbp_mmhg: 120.0,
            dbp_mmhg: 80.0,
            notch_depth: 0.4,
            noise_std: 0.0,
            baseline_drift_amp: 0.0,
            seed: 0,
            fs: DEFAULT_FS,
        }
    }
}

impl SynthConfig {
    pub fn period_s(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let bad = |msg: String| Err(RecordError::InvalidRecord(format!("invalid synth config: {msg}")));
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return bad(format!("fs = {}", self.fs));
        }
        if !(30.0..=200.0).contains(&self.heart_rate_bpm) {
            return bad(format!("heart rate {} outside [30, 200] bpm", self.heart_rate_bpm));
        }
        if !(self.dbp_mmhg > 0.0 && self.sbp_mmhg > self.dbp_mmhg) {
            return bad(format!("need sbp > dbp > 0, got {} / {}", self.sbp_mmhg, self.dbp_mmhg));
        }
        if !(0.0..=1.0).contains(&self.notch_depth) {
            return bad(format!("notch depth {} outside [0, 1]", self.notch_depth));
        }
        if !(self.noise_std >= 0.0 && self.baseline_drift_amp >= 0.0) {
            return bad("noise and drift amplitudes must be non-negative".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s * self.fs >= 2.0 * self.period_s() * self.fs) {
            return bad(format!("duration {} s holds fewer than 2 cardiac cycles", self.duration_s));
        }
        Ok(())
    }
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp()
}

/// Noise-free two-lobe pulse train at phase `phase = t / period` (any real).
///
/// The systolic lobe has unit height; the dicrotic lobe has height
/// `notch_depth`.
pub fn pulse_shape(phase: f64, notch_depth: f64) -> f64 {
    let k = phase.floor();
    let frac = phase - k;
    let mut v = 0.0;
    for beat in -2..=1 {
        let local = frac - beat as f64;
        v += gaussian(local - SYSTOLIC_PHASE, SYSTOLIC_WIDTH)
            + notch_depth * gaussian(local - DICROTIC_PHASE, DICROTIC_WIDTH);
    }
    v
}

/// Minimum and maximum of [`pulse_shape`] over one period.
pub fn pulse_extrema(notch_depth: f64) -> (f64, f64) {
    const GRID: usize = 20_000;
    let f = |p: f64| pulse_shape(p, notch_depth);
    let (mut imin, mut imax) = (0, 0);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..GRID {
        let v = f(i as f64 / GRID as f64);
        if v < vmin {
            vmin = v;
            imin = i;
        }
        if v > vmax {
            vmax = v;
            imax = i;
        }
    }
    let h = 1.0 / GRID as f64;
    let lo = golden_section(|p| f(p), imin as f64 * h - h, imin as f64 * h + h);
    let hi = golden_section(|p| -f(p), imax as f64 * h - h, imax as f64 * h + h);
    (f(lo).min(vmin), f(hi).max(vmax))
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    for _ in 0..80 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    0.5 * (a + b)
}

/// Generates a deterministic synthetic record.
///
/// The PPG is the two-lobe pulse train plus a sinusoidal baseline drift and
/// white Gaussian noise. The ABP channel is the same pulse rescaled so that
/// its per-cycle extremes are exactly `sbp_mmHg` / `dbp_mmHg`; it carries no
/// noise.
pub fn synthesize(config: &SynthConfig) -> Result<Record, RecordError> {
    config.validate()?;
    let n = (config.duration_s * config.fs).round() as usize;
    let period = config.period_s();
    let (pmin, pmax) = pulse_extrema(config.notch_depth);
    let span = config.sbp_mmhg - config.dbp_mmhg;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let drift_phase = rng.random::<f64>() * 2.0 * PI;
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("finite noise std");

    let mut ppg = Vec::with_capacity(n);
    let mut abp = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / config.fs;
        let shape = pulse_shape(t / period, config.notch_depth);
        let drift = config.baseline_drift_amp * (2.0 * PI * DRIFT_HZ * t + drift_phase).sin();
        let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        ppg.push(shape + drift + eps);
        abp.push(config.dbp_mmhg + span * (shape - pmin) / (pmax - pmin));
    }
    let id = format!("synth-{:016x}", config.seed);
    Record::new(id.clone(), id, config.fs, ppg, Some(abp))
}

/// Parameters of a synthetic multi-record cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub records: usize,
    pub duration_s: f64,
    pub sbp_range: [f64; 2],
    pub dbp_range: [f64; 2],
    pub noise_std: f64,
    pub baseline_drift_amp: f64,
    pub fs: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            records: 20,
            duration_s: 960.0,
            sbp_range: [90.0, 160.0],
            dbp_range: [60.0, 100.0],
            noise_std: 0.02,
            baseline_drift_amp: 0.1,
            fs: DEFAULT_FS,
        }
    }
}

/// Minimum pulse pressure enforced when drawing cohort targets, mmHg.
const MIN_PULSE_PRESSURE: f64 = 20.0;

/// Builds the per-record synth configurations of a cohort.
///
/// SBP and DBP are stratified across their ranges so the cohort spans both.
/// Heart rate rises with SBP and the dicrotic lobe shrinks with DBP, which
/// gives the morphological features something to learn from.
pub fn cohort_configs(config: &CohortConfig, seed: u64) -> Result<Vec<SynthConfig>, RecordError> {
    let [s_lo, s_hi] = config.sbp_range;
    let [d_lo, d_hi] = config.dbp_range;
    if config.records == 0 || !(s_lo < s_hi && d_lo < d_hi && d_lo > 0.0) {
        return Err(RecordError::InvalidRecord("invalid cohort configuration".into()));
    }
    let n = config.records;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dbp_order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        dbp_order.swap(i, j);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sbp = s_lo + (i as f64 + rng.random::<f64>()) / n as f64 * (s_hi - s_lo);
        let dbp_raw = d_lo + (dbp_order[i] as f64 + rng.random::<f64>()) / n as f64 * (d_hi - d_lo);
        let dbp = dbp_raw.min(sbp - MIN_PULSE_PRESSURE).max(1.0);
        let sbp_frac = (sbp - s_lo) / (s_hi - s_lo);
        let dbp_frac = ((dbp - d_lo) / (d_hi - d_lo)).clamp(0.0, 1.0);
        let heart_rate_bpm = 55.0 + 30.0 * sbp_frac + rng.random_range(-2.0..2.0);
        let notch_depth = 0.6 - 0.25 * dbp_frac;
        out.push(SynthConfig {
            duration_s: config.duration_s,
            heart_rate_bpm,
            sbp_mmhg: sbp,
            dbp_mmhg: dbp,
            notch_depth,
            noise_std: config.noise_std,
            baseline_drift_amp: config.baseline_drift_amp,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1),
            fs: config.fs,
        });
    }
    Ok(out)
}

/// Synthesizes every record of a cohort. Record `i` is named `rec{i:03}` and
/// belongs to subject `subj{i:03}`.
pub fn synthesize_cohort(config: &CohortConfig, seed: u64) -> Result<Vec<Record>, RecordError> {
    cohort_configs(config, seed)?
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(synthesize(c)?.with_ids(format!("rec{i:03}"), format!("subj{i:03}"))))
        .collect()
}
