//! Pulse-cycle isolation: SDPPG, peak detection, foot-to-foot cycles,
//! frame quality gating and per-cycle ABP labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::{Record, Segment};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("signal of {len} samples is too short (need at least {min})")]
    SignalTooShort { len: usize, min: usize },
    #[error("sequence lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("degenerate cycle starting at sample {start}: flat ABP")]
    DegenerateCycle { start: usize },
    #[error("record {0} has no ABP channel to label cycles")]
    MissingAbp(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One foot-to-foot pulse. Indices refer to the preprocessed PPG; the SDPPG
/// shares its indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub start_idx: usize,
    pub peak_idx: usize,
    pub notch_idx: Option<usize>,
    pub end_idx: usize,
    pub sd_peak_idx: usize,
    pub sd_foot_idx: usize,
    pub frame_id: usize,
}

impl Cycle {
    pub fn duration_s(&self, fs: f64) -> f64 {
        (self.end_idx - self.start_idx) as f64 / fs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameQualityPolicy {
    pub frame_len_s: f64,
    pub amp_mean_low: f64,
    pub amp_mean_high: f64,
}

impl Default for FrameQualityPolicy {
    fn default() -> Self {
        Self { frame_len_s: 10.0, amp_mean_low: 0.01, amp_mean_high: 10.0 }
    }
}

impl FrameQualityPolicy {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.frame_len_s > 0.0) {
            return Err(SegmentationError::InvalidParameter("frame_len_s must be positive".into()));
        }
        if !(self.amp_mean_low < self.amp_mean_high) {
            return Err(SegmentationError::InvalidParameter("amp_mean_low must be < amp_mean_high".into()));
        }
        Ok(())
    }

    pub fn frame_len_samples(&self, fs: f64) -> usize {
        ((self.frame_len_s * fs).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub min_distance_s: f64,
    /// Minimum peak prominence as a fraction of the frame's peak-to-peak range.
    pub prominence_frac: f64,
    pub min_cycle_s: f64,
    pub max_cycle_s: f64,
    pub quality: FrameQualityPolicy,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            min_distance_s: 0.3,
            prominence_frac: 0.3,
            min_cycle_s: 0.3,
            max_cycle_s: 2.0,
            quality: FrameQualityPolicy::default(),
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.min_distance_s > 0.0) {
            return Err(SegmentationError::InvalidParameter("min_distance_s must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prominence_frac) {
            return Err(SegmentationError::InvalidParameter("prominence_frac must lie in [0, 1)".into()));
        }
        if !(0.0 < self.min_cycle_s && self.min_cycle_s < self.max_cycle_s) {
            return Err(SegmentationError::InvalidParameter("need 0 < min_cycle_s < max_cycle_s".into()));
        }
        self.quality.validate()
    }
}

/// Central-difference second derivative in amplitude/s².
///
/// Edges use second-order one-sided stencils so that quadratics are exact
/// everywhere.
pub fn second_derivative(x: &[f64], fs: f64) -> Result<Vec<f64>, SegmentationError> {
    let n = x.len();
    if n < 5 {
        return Err(SegmentationError::SignalTooShort { len: n, min: 5 });
    }
    let k = fs * fs;
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (x[i + 1] - 2.0 * x[i] + x[i - 1]) * k;
    }
    d[0] = (2.0 * x[0] - 5.0 * x[1] + 4.0 * x[2] - x[3]) * k;
    d[n - 1] = (2.0 * x[n - 1] - 5.0 * x[n - 2] + 4.0 * x[n - 3] - x[n - 4]) * k;
    Ok(d)
}

/// Local maxima, with flat tops reported at their (left-leaning) midpoint.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    if n < 3 {
        return out;
    }
    let mut i = 1;
    while i < n - 1 {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead < n - 1 && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                out.push((i + ahead - 1) / 2);
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Height of a peak above the higher of its two bases.
///
/// Each base is the minimum reached when walking away from the peak until a
/// strictly higher sample or the signal edge.
pub fn prominence(x: &[f64], peak: usize) -> f64 {
    let h = x[peak];
    let mut left_min = h;
    for &v in x[..=peak].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &x[peak..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

fn suppress_by_distance(x: &[f64], candidates: Vec<usize>, min_dist: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // Highest first; ties go to the earlier index.
    order.sort_by(|&a, &b| x[candidates[b]].total_cmp(&x[candidates[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; candidates.len()];
    for &i in &order {
        if !keep[i] {
            continue;
        }
        for j in (0..i).rev() {
            if ((candidates[i] - candidates[j]) as f64) >= min_dist {
                break;
            }
            keep[j] = false;
        }
        for j in i + 1..candidates.len() {
            if ((candidates[j] - candidates[i]) as f64) >= min_dist {
                break;
            }
            keep[j] = false;
        }
    }
    candidates.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect()
}

fn detect_peaks_by(x: &[f64], fs: f64, min_distance_s: f64, threshold: impl Fn(usize) -> f64) -> Vec<usize> {
    let candidates: Vec<usize> =
        local_maxima(x).into_iter().filter(|&p| prominence(x, p) >= threshold(p)).collect();
    suppress_by_distance(x, candidates, min_distance_s * fs)
}

/// Local maxima with prominence at least `min_prominence`, thinned so that no
/// two survivors are closer than `min_distance_s`; higher peaks win.
pub fn detect_peaks(x: &[f64], fs: f64, min_distance_s: f64, min_prominence: f64) -> Vec<usize> {
    detect_peaks_by(x, fs, min_distance_s, |_| min_prominence)
}

fn argmin(x: &[f64], lo: usize, hi: usize) -> usize {
    (lo..=hi).min_by(|&a, &b| x[a].total_cmp(&x[b])).expect("non-empty range")
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    // First index of the maximum.
    (lo..=hi).fold(lo, |best, i| if x[i] > x[best] { i } else { best })
}

fn deepest_interior_min(x: &[f64], peak: usize, end: usize) -> Option<usize> {
    (peak + 1..end)
        .filter(|&j| x[j - 1] > x[j] && x[j] <= x[j + 1])
        .min_by(|&a, &b| x[a].total_cmp(&x[b]))
}

/// Foot-to-foot cycles of a contiguous PPG stretch.
///
/// Peaks are detected with a prominence floor of `prominence_frac` times the
/// peak-to-peak range of the frame holding each candidate. The foot before a
/// peak is the minimum since the previous peak; before the first and after
/// the last peak only a true interior minimum counts, so partial cycles at
/// the edges are dropped. Cycles outside `[min_cycle_s, max_cycle_s]` or
/// whose peak is not their maximum are discarded. `frame_id` is left at 0.
pub fn extract_cycles(
    ppg: &[f64],
    sdppg: &[f64],
    fs: f64,
    config: &SegmentConfig,
) -> Result<Vec<Cycle>, SegmentationError> {
    if ppg.len() != sdppg.len() {
        return Err(SegmentationError::LengthMismatch { a: ppg.len(), b: sdppg.len() });
    }
    let n = ppg.len();
    if n < 3 {
        return Ok(Vec::new());
    }
    let flen = config.quality.frame_len_samples(fs);
    let ranges: Vec<f64> = ppg
        .chunks(flen)
        .map(|c| {
            let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            hi - lo
        })
        .collect();
    let peaks = detect_peaks_by(ppg, fs, config.min_distance_s, |p| config.prominence_frac * ranges[p / flen]);
    if peaks.is_empty() {
        return Ok(Vec::new());
    }

    let mut feet: Vec<(usize, usize)> = Vec::new(); // (foot, peak after it)
    let first = argmin(ppg, 0, peaks[0]);
    if first > 0 && first < peaks[0] {
        feet.push((first, peaks[0]));
    }
    for w in peaks.windows(2) {
        feet.push((argmin(ppg, w[0], w[1]), w[1]));
    }
    let last_peak = *peaks.last().expect("non-empty");
    let tail = argmin(ppg, last_peak, n - 1);
    let tail_foot = (tail > last_peak && tail < n - 1).then_some(tail);

    let mut cycles = Vec::new();
    for (k, &(start, peak)) in feet.iter().enumerate() {
        let end = match feet.get(k + 1) {
            Some(&(next, _)) => next,
            None => match tail_foot {
                Some(t) => t,
                None => break,
            },
        };
        if !(start < peak && peak < end) {
            continue;
        }
        let dur = (end - start) as f64 / fs;
        if dur < config.min_cycle_s || dur > config.max_cycle_s {
            continue;
        }
        if ppg[start..=end].iter().any(|&v| v > ppg[peak]) {
            continue;
        }
        let sd_peak = argmax(sdppg, start, peak);
        let sd_foot = argmin(sdppg, start, sd_peak);
        cycles.push(Cycle {
            start_idx: start,
            peak_idx: peak,
            notch_idx: deepest_interior_min(ppg, peak, end),
            end_idx: end,
            sd_peak_idx: sd_peak,
            sd_foot_idx: sd_foot,
            frame_id: 0,
        });
    }
    Ok(cycles)
}

/// Splits the signal into consecutive frames and keeps those whose mean
/// absolute amplitude lies inside the policy band. A trailing partial frame
/// is evaluated over its available samples.
pub fn frame_quality_gate(ppg: &[f64], fs: f64, policy: &FrameQualityPolicy) -> Vec<(usize, bool)> {
    let flen = policy.frame_len_samples(fs);
    ppg.chunks(flen)
        .enumerate()
        .map(|(id, frame)| {
            let m = frame.iter().map(|v| v.abs()).sum::<f64>() / frame.len() as f64;
            (id, m >= policy.amp_mean_low && m <= policy.amp_mean_high)
        })
        .collect()
}

/// Per-cycle (SBP, DBP): ABP extrema over the closed cycle span.
pub fn label_targets(abp: &[f64], cycles: &[Cycle]) -> Result<Vec<(f64, f64)>, SegmentationError> {
    cycles
        .iter()
        .map(|c| {
            if c.end_idx >= abp.len() {
                return Err(SegmentationError::LengthMismatch { a: abp.len(), b: c.end_idx + 1 });
            }
            let span = &abp[c.start_idx..=c.end_idx];
            let sbp = span.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dbp = span.iter().copied().fold(f64::INFINITY, f64::min);
            if !(sbp > dbp) {
                return Err(SegmentationError::DegenerateCycle { start: c.start_idx });
            }
            Ok((sbp, dbp))
        })
        .collect()
}

/// SDPPG computed independently inside each segment, so no derivative
/// stencil straddles a cleaning gap. Segments shorter than five samples are
/// left at zero.
pub fn sdppg_by_segments(record: &Record) -> Vec<f64> {
    let ppg = record.ppg();
    let mut out = vec![0.0; ppg.len()];
    for seg in record.segments_or_whole() {
        if let Ok(d) = second_derivative(&ppg[seg.start..seg.end], record.fs()) {
            out[seg.start..seg.end].copy_from_slice(&d);
        }
    }
    out
}

/// One row of `cycles.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleRecord {
    pub frame_id: usize,
    pub start: usize,
    pub peak: usize,
    pub notch: Option<usize>,
    pub end: usize,
    pub sd_peak: usize,
    pub sd_foot: usize,
    pub sbp: f64,
    pub dbp: f64,
}

impl CycleRecord {
    pub fn new(c: &Cycle, (sbp, dbp): (f64, f64)) -> Self {
        Self {
            frame_id: c.frame_id,
            start: c.start_idx,
            peak: c.peak_idx,
            notch: c.notch_idx,
            end: c.end_idx,
            sd_peak: c.sd_peak_idx,
            sd_foot: c.sd_foot_idx,
            sbp,
            dbp,
        }
    }

    pub fn cycle(&self) -> Cycle {
        Cycle {
            start_idx: self.start,
            peak_idx: self.peak,
            notch_idx: self.notch,
            end_idx: self.end,
            sd_peak_idx: self.sd_peak,
            sd_foot_idx: self.sd_foot,
            frame_id: self.frame_id,
        }
    }

    pub fn target(&self) -> (f64, f64) {
        (self.sbp, self.dbp)
    }
}

/// Cycles of a whole record, extracted segment by segment.
///
/// `frame_id` is the quality-gate frame holding the cycle's start, counted
/// over the record's sample index.
pub fn segment_record(record: &Record, config: &SegmentConfig) -> Result<Vec<CycleRecord>, SegmentationError> {
    config.validate()?;
    let abp = record.abp().ok_or_else(|| SegmentationError::MissingAbp(record.record_id().to_string()))?;
    let fs = record.fs();
    let flen = config.quality.frame_len_samples(fs);
    let sdppg = sdppg_by_segments(record);
    let mut cycles = Vec::new();
    for Segment { start, end } in record.segments_or_whole() {
        let local = extract_cycles(&record.ppg()[start..end], &sdppg[start..end], fs, config)?;
        cycles.extend(local.into_iter().map(|mut c| {
            c.start_idx += start;
            c.peak_idx += start;
            c.end_idx += start;
            c.sd_peak_idx += start;
            c.sd_foot_idx += start;
            c.notch_idx = c.notch_idx.map(|i| i + start);
            c.frame_id = c.start_idx / flen;
            c
        }));
    }
    let targets = label_targets(abp, &cycles)?;
    Ok(cycles.iter().zip(targets).map(|(c, t)| CycleRecord::new(c, t)).collect())
}
