//! Per-cycle morphological features, stacked-cycle samples, the dataset file
//! format and z-score normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::{frame_quality_gate, sdppg_by_segments, Cycle, CycleRecord, FrameQualityPolicy};
use crate::waveform::{sidecar_path, Record};

pub const N_FEATURES: usize = 12;
pub const SEQ_LEN: usize = 48;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "td1", "trhp", "td2", "tp", "tfh", "td3", "pbf", "ppgi", "sd_tfhf", "sd_amp", "sdppgi", "td4",
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("degenerate cycle starting at sample {start}: peak does not rise above the foot")]
    DegenerateCycle { start: usize },
    #[error("cycle starting at sample {start} has inconsistent landmark order")]
    InconsistentCycle { start: usize },
    #[error("cycle index {index} outside signal of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("length mismatch: {what} ({a} vs {b})")]
    LengthMismatch { what: &'static str, a: usize, b: usize },
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt dataset {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported dataset version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

/// The twelve per-cycle features. Durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub td1: f64,
    pub trhp: f64,
    pub td2: f64,
    pub tp: f64,
    pub tfh: f64,
    pub td3: f64,
    pub pbf: f64,
    pub ppgi: f64,
    pub sd_tfhf: f64,
    pub sd_amp: f64,
    pub sdppgi: f64,
    pub td4: f64,
}

impl FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.td1, self.trhp, self.td2, self.tp, self.tfh, self.td3, self.pbf, self.ppgi, self.sd_tfhf,
            self.sd_amp, self.sdppgi, self.td4,
        ]
    }

    pub fn from_array(v: [f64; N_FEATURES]) -> Self {
        let [td1, trhp, td2, tp, tfh, td3, pbf, ppgi, sd_tfhf, sd_amp, sdppgi, td4] = v;
        Self { td1, trhp, td2, tp, tfh, td3, pbf, ppgi, sd_tfhf, sd_amp, sdppgi, td4 }
    }
}

/// First upward crossing of `level` in `x[from..=to]`, as the sample before
/// the crossing and the interpolated fraction past it.
fn rising_crossing(x: &[f64], from: usize, to: usize, level: f64) -> Option<(usize, f64)> {
    (from + 1..=to)
        .find(|&j| x[j] >= level && x[j - 1] < level)
        .map(|j| (j - 1, (level - x[j - 1]) / (x[j] - x[j - 1])))
}

/// First downward crossing of `level` in `x[from..=to]`.
fn falling_crossing(x: &[f64], from: usize, to: usize, level: f64) -> Option<(usize, f64)> {
    (from + 1..=to)
        .find(|&j| x[j] <= level && x[j - 1] > level)
        .map(|j| (j - 1, (x[j - 1] - level) / (x[j - 1] - x[j])))
}

/// Seconds from sample `origin` to a crossing; offsets are formed in integer
/// arithmetic so results do not depend on absolute position.
fn since(origin: usize, crossing: (usize, f64), dt: f64) -> f64 {
    ((crossing.0 - origin) as f64 + crossing.1) * dt
}

fn trapezoid(y: impl Iterator<Item = f64>, dt: f64) -> f64 {
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    for v in y {
        if let Some(p) = prev {
            total += 0.5 * (p + v) * dt;
        }
        prev = Some(v);
    }
    total
}

/// Computes the twelve features of one cycle.
///
/// Half-amplitude crossings sit at `foot + (peak - foot) / 2` and are located
/// by linear interpolation; a missing falling crossing falls back to the
/// cycle end. The SDPPG half-width crossing is measured against half the
/// SDPPG peak value. TD2 is 0 when the cycle has no dicrotic notch.
pub fn compute_features(
    cycle: &Cycle,
    ppg: &[f64],
    sdppg: &[f64],
    fs: f64,
    cycles_in_frame: usize,
) -> Result<FeatureVector, FeatureError> {
    if ppg.len() != sdppg.len() {
        return Err(FeatureError::LengthMismatch { what: "ppg vs sdppg", a: ppg.len(), b: sdppg.len() });
    }
    let Cycle { start_idx: s, peak_idx: p, end_idx: e, sd_peak_idx: sp, sd_foot_idx: sf, .. } = *cycle;
    for idx in [s, p, e, sp, sf].into_iter().chain(cycle.notch_idx) {
        if idx >= ppg.len() {
            return Err(FeatureError::IndexOutOfRange { index: idx, len: ppg.len() });
        }
    }
    let notch_ok = cycle.notch_idx.is_none_or(|n| p < n && n < e);
    if !(s < p && p < e && s <= sf && sf <= sp && sp <= e && notch_ok) {
        return Err(FeatureError::InconsistentCycle { start: s });
    }
    if ppg[p] <= ppg[s] {
        return Err(FeatureError::DegenerateCycle { start: s });
    }
    let dt = 1.0 / fs;
    let level = ppg[s] + 0.5 * (ppg[p] - ppg[s]);
    let rise = rising_crossing(ppg, s, p, level).unwrap_or((p, 0.0));
    let fall = falling_crossing(ppg, p, e, level).unwrap_or((e, 0.0));
    let sd_fall = falling_crossing(sdppg, sp, e, 0.5 * sdppg[sp]).unwrap_or((e, 0.0));
    let base = ppg[s];

    Ok(FeatureVector {
        td1: (e - s) as f64 * dt,
        trhp: since(s, rise, dt),
        td2: cycle.notch_idx.map_or(0.0, |n| (n - p) as f64 * dt),
        tp: (p - s) as f64 * dt,
        tfh: since(p, fall, dt),
        td3: (e - p) as f64 * dt,
        pbf: cycles_in_frame as f64,
        ppgi: trapezoid(ppg[s..=e].iter().map(|v| v - base), dt),
        sd_tfhf: since(s, sd_fall, dt),
        sd_amp: sdppg[s..=e].iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sdppgi: trapezoid(sdppg[s..=e].iter().map(|v| v.max(0.0)), dt),
        td4: (sp - sf) as f64 * dt,
    })
}

/// Number of cycles starting in each quality frame.
pub fn cycles_per_frame(cycles: &[Cycle]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for c in cycles {
        *counts.entry(c.frame_id).or_insert(0) += 1;
    }
    counts
}

/// One model input: `seq_len` stacked feature vectors and the window's
/// mean targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub features: Vec<[f64; N_FEATURES]>,
    pub sbp: f64,
    pub dbp: f64,
    pub sample_id: u64,
    pub source_record: String,
    pub subject_id: String,
}

/// Stacks non-overlapping windows of `seq_len` consecutive cycles.
///
/// A cycle is usable when its frame is not in `rejected_frames`. Consecutive
/// usable cycles form a run while each one ends where the next starts; any
/// gap (cleaning, rejected frame, discarded cycle) closes the run. Each run
/// is chopped greedily from its start and the remainder dropped. Sample ids
/// count from 0.
pub fn assemble_samples(
    cycles: &[Cycle],
    features: &[FeatureVector],
    targets: &[(f64, f64)],
    rejected_frames: &BTreeSet<usize>,
    seq_len: usize,
    source_record: &str,
    subject_id: &str,
) -> Result<Vec<FrameSample>, FeatureError> {
    if cycles.len() != features.len() {
        return Err(FeatureError::LengthMismatch { what: "cycles vs features", a: cycles.len(), b: features.len() });
    }
    if cycles.len() != targets.len() {
        return Err(FeatureError::LengthMismatch { what: "cycles vs targets", a: cycles.len(), b: targets.len() });
    }
    let mut samples = Vec::new();
    if seq_len == 0 {
        return Ok(samples);
    }
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, samples: &mut Vec<FrameSample>| {
        for chunk in run.chunks_exact(seq_len) {
            let n = seq_len as f64;
            let sbp = chunk.iter().map(|&i| targets[i].0).sum::<f64>() / n;
            let dbp = chunk.iter().map(|&i| targets[i].1).sum::<f64>() / n;
            if !(sbp > dbp && dbp > 0.0) {
                continue;
            }
            samples.push(FrameSample {
                features: chunk.iter().map(|&i| features[i].to_array()).collect(),
                sbp,
                dbp,
                sample_id: samples.len() as u64,
                source_record: source_record.to_string(),
                subject_id: subject_id.to_string(),
            });
        }
        run.clear();
    };
    for (i, c) in cycles.iter().enumerate() {
        let usable = !rejected_frames.contains(&c.frame_id);
        let continues = run.last().is_some_and(|&prev| cycles[prev].end_idx == c.start_idx);
        if !usable || !continues {
            flush(&mut run, &mut samples);
        }
        if usable {
            run.push(i);
        }
    }
    flush(&mut run, &mut samples);
    Ok(samples)
}

/// Features and stacked samples for one preprocessed record.
///
/// Frames failing the quality gate are rejected; cycles whose features cannot
/// be computed (flat or malformed) are dropped, which breaks the run they
/// sit in.
pub fn record_samples(
    record: &Record,
    cycles: &[CycleRecord],
    quality: &FrameQualityPolicy,
    seq_len: usize,
) -> Result<Vec<FrameSample>, FeatureError> {
    let fs = record.fs();
    let sdppg = sdppg_by_segments(record);
    let rejected: BTreeSet<usize> =
        frame_quality_gate(record.ppg(), fs, quality).into_iter().filter(|(_, ok)| !ok).map(|(id, _)| id).collect();
    let all: Vec<Cycle> = cycles.iter().map(CycleRecord::cycle).collect();
    let per_frame = cycles_per_frame(&all);

    let (mut kept, mut feats, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for (c, rec) in all.iter().zip(cycles) {
        match compute_features(c, record.ppg(), &sdppg, fs, per_frame[&c.frame_id]) {
            Ok(f) => {
                kept.push(*c);
                feats.push(f);
                targets.push(rec.target());
            }
            Err(FeatureError::DegenerateCycle { .. } | FeatureError::InconsistentCycle { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    assemble_samples(&kept, &feats, &targets, &rejected, seq_len, record.record_id(), record.subject_id())
}

/// A validated collection of samples sharing one sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    seq_len: usize,
    samples: Vec<FrameSample>,
}

impl Dataset {
    pub fn new(seq_len: usize, samples: Vec<FrameSample>) -> Result<Self, DatasetError> {
        if seq_len == 0 {
            return Err(DatasetError::Invalid("sequence length must be positive".into()));
        }
        for s in &samples {
            if s.features.len() != seq_len {
                return Err(DatasetError::Invalid(format!(
                    "sample {} has {} rows, expected {seq_len}",
                    s.sample_id,
                    s.features.len()
                )));
            }
            if s.features.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DatasetError::Invalid(format!("sample {} has non-finite features", s.sample_id)));
            }
            if !(s.sbp.is_finite() && s.dbp.is_finite() && s.sbp > s.dbp && s.dbp > 0.0) {
                return Err(DatasetError::Invalid(format!(
                    "sample {} violates sbp > dbp > 0 ({}, {})",
                    s.sample_id, s.sbp, s.dbp
                )));
            }
        }
        Ok(Self { seq_len, samples })
    }

    /// Concatenates per-record sample lists and renumbers ids from 0.
    pub fn from_parts(seq_len: usize, parts: Vec<Vec<FrameSample>>) -> Result<Self, DatasetError> {
        let mut samples: Vec<FrameSample> = parts.into_iter().flatten().collect();
        for (i, s) in samples.iter_mut().enumerate() {
            s.sample_id = i as u64;
        }
        Self::new(seq_len, samples)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn samples(&self) -> &[FrameSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<FrameSample> {
        self.samples
    }

    /// Number of distinct source records.
    pub fn record_count(&self) -> usize {
        self.samples.iter().map(|s| s.source_record.as_str()).collect::<BTreeSet<_>>().len()
    }
}

const DATASET_MAGIC: &[u8; 4] = b"PFDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    sample_id: u64,
    source_record: String,
    subject_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    samples: Vec<SampleMeta>,
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Writes the binary dataset plus a JSON sidecar with per-sample provenance.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_at(path));
    put(DATASET_MAGIC)?;
    put(&DATASET_VERSION.to_le_bytes())?;
    put(&(dataset.len() as u64).to_le_bytes())?;
    put(&(dataset.seq_len as u32).to_le_bytes())?;
    put(&(N_FEATURES as u32).to_le_bytes())?;
    for s in &dataset.samples {
        for v in s.features.iter().flatten() {
            put(&v.to_le_bytes())?;
        }
        put(&s.sbp.to_le_bytes())?;
        put(&s.dbp.to_le_bytes())?;
        put(&s.sample_id.to_le_bytes())?;
    }
    w.flush().map_err(io_at(path))?;

    let meta = DatasetMeta {
        samples: dataset
            .samples
            .iter()
            .map(|s| SampleMeta {
                sample_id: s.sample_id,
                source_record: s.source_record.clone(),
                subject_id: s.subject_id.clone(),
            })
            .collect(),
    };
    let meta_path = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(&meta_path, text).map_err(io_at(&meta_path))
}

struct ByteReader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> ByteReader<'_, R> {
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DatasetError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DatasetError::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what}"),
            },
            _ => DatasetError::Io { path: self.path.to_path_buf(), source: e },
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        self.array::<4>(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64, DatasetError> {
        self.array::<8>(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64, DatasetError> {
        self.array::<8>(what).map(f64::from_le_bytes)
    }
}

/// Reads a binary dataset. Provenance comes from the sidecar when present and
/// defaults to `"unknown"` otherwise.
pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let file = File::open(path).map_err(io_at(path))?;
    let mut r = ByteReader { inner: BufReader::new(file), path };
    let corrupt = |reason: String| DatasetError::Corrupt { path: path.to_path_buf(), reason };
    if &r.array::<4>("magic")? != DATASET_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let n = r.u64("sample count")?;
    let seq_len = r.u32("sequence length")? as usize;
    let width = r.u32("feature count")? as usize;
    if width != N_FEATURES {
        return Err(corrupt(format!("feature count {width}, expected {N_FEATURES}")));
    }
    let mut samples = Vec::new();
    for _ in 0..n {
        let mut features = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            let mut row = [0.0; N_FEATURES];
            for v in row.iter_mut() {
                *v = r.f64("features")?;
            }
            features.push(row);
        }
        let sbp = r.f64("sbp")?;
        let dbp = r.f64("dbp")?;
        let sample_id = r.u64("sample id")?;
        samples.push(FrameSample {
            features,
            sbp,
            dbp,
            sample_id,
            source_record: "unknown".into(),
            subject_id: "unknown".into(),
        });
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest).map_err(io_at(path))?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }

    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(io_at(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.samples.len() != samples.len() {
            return Err(corrupt(format!(
                "sidecar lists {} samples, file holds {}",
                meta.samples.len(),
                samples.len()
            )));
        }
        for (s, m) in samples.iter_mut().zip(meta.samples) {
            if s.sample_id != m.sample_id {
                return Err(corrupt(format!("sidecar id {} does not match sample {}", m.sample_id, s.sample_id)));
            }
            s.source_record = m.source_record;
            s.subject_id = m.subject_id;
        }
    }
    Dataset::new(seq_len, samples)
}

/// Flat CSV: one row per sample, `seq_len * 12` feature columns then sbp, dbp.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = Vec::with_capacity(dataset.seq_len * N_FEATURES + 2);
    for t in 0..dataset.seq_len {
        header.extend(FEATURE_NAMES.iter().map(|name| format!("t{t:02}_{name}")));
    }
    header.push("sbp".into());
    header.push("dbp".into());
    w.write_record(&header)?;
    for s in &dataset.samples {
        let row: Vec<String> = s
            .features
            .iter()
            .flatten()
            .chain([&s.sbp, &s.dbp])
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(io_at(path))
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns that were constant over the fit set; their std is stored as 1.
    pub flagged: Vec<usize>,
}

impl NormStats {
    /// Fits means and population standard deviations over every row of every
    /// sample.
    pub fn fit(samples: &[FrameSample]) -> Result<Self, FeatureError> {
        if samples.len() < 2 {
            return Err(FeatureError::TooFewSamples { n: samples.len(), min: 2 });
        }
        let rows = || samples.iter().flat_map(|s| s.features.iter());
        let count = rows().count() as f64;
        let mut means = vec![0.0; N_FEATURES];
        for row in rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= count);
        let mut vars = vec![0.0; N_FEATURES];
        for row in rows() {
            for ((acc, v), m) in vars.iter_mut().zip(row).zip(&means) {
                *acc += (v - m).powi(2);
            }
        }
        let mut stds = Vec::with_capacity(N_FEATURES);
        let mut flagged = Vec::new();
        for (j, (var, m)) in vars.iter().zip(&means).enumerate() {
            let sd = (var / count).sqrt();
            if sd <= 1e-12 * m.abs().max(f64::MIN_POSITIVE) {
                flagged.push(j);
                stds.push(1.0);
            } else {
                stds.push(sd);
            }
        }
        Ok(Self { means, stds, flagged })
    }

    pub fn apply(&self, sample: &FrameSample) -> FrameSample {
        let mut out = sample.clone();
        for row in out.features.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if self.flagged.contains(&j) { 0.0 } else { (*v - self.means[j]) / self.stds[j] };
            }
        }
        out
    }

    pub fn apply_all(&self, samples: &[FrameSample]) -> Vec<FrameSample> {
        samples.iter().map(|s| self.apply(s)).collect()
    }
}

/// Fits [`NormStats`] on `samples` and returns them standardized. Targets are
/// left in mmHg.
pub fn normalize_dataset(samples: &[FrameSample]) -> Result<(Vec<FrameSample>, NormStats), FeatureError> {
    let stats = NormStats::fit(samples)?;
    Ok((stats.apply_all(samples), stats))
}
