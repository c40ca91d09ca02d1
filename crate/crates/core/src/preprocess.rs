//! Record cleaning and the bandpass + moving-average filtering chain.
//!
//! Cleaning rejects records shorter than a minimum duration and drops windows
//! that are flat or contain too many out-of-range samples. Filtering runs an
//! order-N Butterworth bandpass forward and backward (zero phase), then a
//! centred moving average. Only the PPG is filtered: the ABP channel is
//! cropped to the kept segments but keeps its absolute mmHg levels.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::{Record, RecordError, Segment};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid bandpass spec: {0}")]
    InvalidSpec(String),
    #[error("signal of {len} samples is too short (need more than {min})")]
    SignalTooShort { len: usize, min: usize },
    #[error("moving-average window {window} exceeds signal length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("record rejected: {0}")]
    Rejected(Rejection),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Amplitude bounds used by the out-of-range rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AmplitudeBounds {
    /// `mean ± k·std` of the record's PPG.
    Sigma { k: f64 },
    Fixed { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningPolicy {
    pub min_duration_s: f64,
    pub amplitude: AmplitudeBounds,
    pub flatline_var_threshold: f64,
    pub flatline_window_s: f64,
    pub max_outrange_fraction: f64,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        Self {
            min_duration_s: 900.0,
            amplitude: AmplitudeBounds::Sigma { k: 5.0 },
            flatline_var_threshold: 1e-4,
            flatline_window_s: 2.0,
            max_outrange_fraction: 0.05,
        }
    }
}

impl CleaningPolicy {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::InvalidParameter(format!("cleaning policy: {m}")));
        if !(self.min_duration_s > 0.0) {
            return bad("min_duration_s must be positive");
        }
        if !(self.flatline_window_s > 0.0) {
            return bad("flatline_window_s must be positive");
        }
        if !(self.flatline_var_threshold >= 0.0) {
            return bad("flatline_var_threshold must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.max_outrange_fraction) {
            return bad("max_outrange_fraction must lie in [0, 1]");
        }
        match self.amplitude {
            AmplitudeBounds::Sigma { k } if !(k > 0.0) => bad("sigma multiplier must be positive"),
            AmplitudeBounds::Fixed { low, high } if !(low < high) => bad("amp_low must be < amp_high"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rejection {
    TooShort { duration_s: f64, min_duration_s: f64 },
    NoUsableSignal,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::TooShort { duration_s, min_duration_s } => {
                write!(f, "record lasts {duration_s:.1} s, shorter than {min_duration_s} s")
            }
            Rejection::NoUsableSignal => write!(f, "no window passed the flat-line/amplitude rules"),
        }
    }
}

/// JSON cleaning report, one per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub record_id: String,
    pub kept_segments: Vec<Segment>,
    pub rejected: bool,
    pub reason: Option<String>,
}

impl CleaningReport {
    pub fn new(record_id: &str, outcome: &Result<Vec<Segment>, Rejection>) -> Self {
        match outcome {
            Ok(kept) => Self {
                record_id: record_id.to_string(),
                kept_segments: kept.clone(),
                rejected: false,
                reason: None,
            },
            Err(r) => Self {
                record_id: record_id.to_string(),
                kept_segments: Vec::new(),
                rejected: true,
                reason: Some(r.to_string()),
            },
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Splits a record into kept segments.
///
/// The record is cut into consecutive windows of `flatline_window_s` (a short
/// remainder joins the last window). A window is dropped when its variance is
/// below the flat-line floor or when more than `max_outrange_fraction` of its
/// samples fall outside the amplitude bounds. Runs of kept windows become
/// maximal, ordered, non-overlapping segments.
pub fn clean_record(record: &Record, policy: &CleaningPolicy) -> Result<Vec<Segment>, Rejection> {
    let duration_s = record.duration_s();
    if duration_s < policy.min_duration_s {
        return Err(Rejection::TooShort { duration_s, min_duration_s: policy.min_duration_s });
    }
    let x = record.ppg();
    let n = x.len();
    let (low, high) = match policy.amplitude {
        AmplitudeBounds::Fixed { low, high } => (low, high),
        AmplitudeBounds::Sigma { k } => {
            let (m, v) = mean_var(x);
            (m - k * v.sqrt(), m + k * v.sqrt())
        }
    };
    let w = ((policy.flatline_window_s * record.fs()).round() as usize).max(2);
    let n_windows = (n / w).max(1);

    let mut kept: Vec<Segment> = Vec::new();
    for k in 0..n_windows {
        let start = k * w;
        let end = if k + 1 == n_windows { n } else { start + w };
        let win = &x[start..end];
        let (_, var) = mean_var(win);
        let outside = win.iter().filter(|&&v| v < low || v > high).count();
        let keep = var >= policy.flatline_var_threshold
            && (outside as f64) <= policy.max_outrange_fraction * win.len() as f64;
        if !keep {
            continue;
        }
        match kept.last_mut() {
            Some(last) if last.end == start => last.end = end,
            _ => kept.push(Segment::new(start, end)),
        }
    }
    if kept.is_empty() {
        return Err(Rejection::NoUsableSignal);
    }
    Ok(kept)
}

/// Butterworth bandpass request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub order: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub fs: f64,
}

impl BandpassSpec {
    pub fn new(order: usize, f_low: f64, f_high: f64, fs: f64) -> Self {
        Self { order, f_low, f_high, fs }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.order == 0 {
            return Err(FilterError::InvalidSpec("order must be positive".into()));
        }
        if !(self.fs > 0.0 && 0.0 < self.f_low && self.f_low < self.f_high && self.f_high < self.fs / 2.0) {
            return Err(FilterError::InvalidSpec(format!(
                "need 0 < f_low < f_high < fs/2, got {} / {} at fs {}",
                self.f_low, self.f_high, self.fs
            )));
        }
        Ok(())
    }
}

/// Transfer-function coefficients `b / a` with `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IirFilter {
    b: Vec<f64>,
    a: Vec<f64>,
    /// Cascade of biquads `[b0, b1, b2, 1, a1, a2]` equal to `b / a`, kept
    /// when the filter was designed from poles and zeros. Filtering runs on
    /// the cascade when present because high-order direct forms amplify
    /// rounding error.
    sections: Option<Vec<[f64; 6]>>,
}

impl IirFilter {
    /// Normalizes by `a[0]` and rejects non-finite or unstable filters.
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self, FilterError> {
        if b.is_empty() || a.is_empty() || a[0] == 0.0 {
            return Err(FilterError::InvalidSpec("empty coefficients or a[0] == 0".into()));
        }
        let a0 = a[0];
        let f = Self {
            b: b.iter().map(|v| v / a0).collect(),
            a: a.iter().map(|v| v / a0).collect(),
            sections: None,
        };
        if f.b.iter().chain(&f.a).any(|v| !v.is_finite()) {
            return Err(FilterError::InvalidSpec("non-finite coefficient".into()));
        }
        if !f.is_stable() {
            return Err(FilterError::InvalidSpec("filter has poles on or outside the unit circle".into()));
        }
        Ok(f)
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    /// Roots of the feedback polynomial, taken per biquad when the cascade is
    /// known.
    pub fn poles(&self) -> Vec<Complex64> {
        match &self.sections {
            Some(sections) => sections
                .iter()
                .flat_map(|sec| {
                    let (a1, a2) = (sec[4], sec[5]);
                    let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
                    [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
                })
                .collect(),
            None => poly_roots(&self.a),
        }
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// `H(e^{j 2π f / fs})`.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * f / fs;
        let eval = |c: &[f64]| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| Complex64::from_polar(v, -w * k as f64))
                .sum::<Complex64>()
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn sections(&self) -> Option<&[[f64; 6]]> {
        self.sections.as_deref()
    }

    fn order_len(&self) -> usize {
        self.a.len().max(self.b.len())
    }
}

/// Groups poles into conjugate pairs (or pairs of real poles) as biquad
/// denominators.
fn pair_poles(poles: &[Complex64]) -> Vec<[f64; 2]> {
    const IMAG_TOL: f64 = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > IMAG_TOL).collect();
    complex.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= IMAG_TOL).map(|p| p.re).collect();
    real.sort_by(f64::total_cmp);
    let mut out: Vec<[f64; 2]> = complex.iter().map(|p| [-2.0 * p.re, p.norm_sqr()]).collect();
    for pair in real.chunks(2) {
        match pair {
            [p, q] => out.push([-(p + q), p * q]),
            [p] => out.push([-p, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

/// Roots of `c[0] x^n + c[1] x^{n-1} + ... + c[n]` by Aberth–Ehrlich iteration.
pub fn poly_roots(c: &[f64]) -> Vec<Complex64> {
    let first = c.iter().position(|&v| v != 0.0).unwrap_or(c.len());
    let c = &c[first..];
    if c.len() < 2 {
        return Vec::new();
    }
    let n = c.len() - 1;
    let monic: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v / c[0], 0.0)).collect();
    let eval = |z: Complex64| {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for &coef in &monic {
            dp = dp * z + p;
            p = p * z + coef;
        }
        (p, dp)
    };
    let radius = 1.0 + monic[1..].iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut z: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(radius * 0.5, 2.0 * PI * k as f64 / n as f64 + 0.4))
        .collect();
    for _ in 0..500 {
        let mut max_step: f64 = 0.0;
        for i in 0..n {
            let (p, dp) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repulsion: Complex64 =
                (0..n).filter(|&j| j != i).map(|j| (z[i] - z[j]).inv()).sum();
            let step = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            z[i] -= step;
            max_step = max_step.max(step.norm());
        }
        if max_step < 1e-15 {
            break;
        }
    }
    z
}

/// Expands `prod (x - r_i)` into real coefficients, highest power first.
fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c.into_iter().map(|v| v.re).collect()
}

/// Designs a digital Butterworth bandpass.
///
/// Analog lowpass prototype poles, lowpass-to-bandpass transform around the
/// pre-warped band edges, bilinear transform, then expansion to `(b, a)`.
/// The passband gain at the geometric centre is 1.
pub fn design_butterworth_bandpass(spec: &BandpassSpec) -> Result<IirFilter, FilterError> {
    spec.validate()?;
    let n = spec.order;
    let fs2 = 2.0 * spec.fs;

    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let m = -(n as f64) + 1.0 + 2.0 * k as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64))
        })
        .collect();

    let w_low = fs2 * (PI * spec.f_low / spec.fs).tan();
    let w_high = fs2 * (PI * spec.f_high / spec.fs).tan();
    let bw = w_high - w_low;
    let w0 = (w_low * w_high).sqrt();

    // Each prototype pole p maps to the two roots of s^2 - p·bw·s + w0^2.
    let mut analog_poles = Vec::with_capacity(2 * n);
    for &p in &proto {
        let half = p * bw / 2.0;
        let disc = (half * half - w0 * w0).sqrt();
        analog_poles.push(half + disc);
        analog_poles.push(half - disc);
    }
    // n zeros at s = 0; gain bw^n.
    let analog_gain = bw.powi(n as i32);

    let digital_poles: Vec<Complex64> =
        analog_poles.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
    let mut digital_zeros = vec![Complex64::new(1.0, 0.0); n];
    digital_zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), n));
    let denom: Complex64 = analog_poles.iter().map(|&p| fs2 - p).product();
    let gain = analog_gain * (Complex64::new(fs2.powi(n as i32), 0.0) / denom).re;

    let b: Vec<f64> = poly_from_roots(&digital_zeros).iter().map(|v| v * gain).collect();
    let a = poly_from_roots(&digital_poles);
    // Every biquad gets one zero at z = 1 and one at z = -1.
    let sections: Vec<[f64; 6]> = pair_poles(&digital_poles)
        .iter()
        .enumerate()
        .map(|(i, [a1, a2])| {
            let g = if i == 0 { gain } else { 1.0 };
            [g, 0.0, -g, 1.0, *a1, *a2]
        })
        .collect();
    if sections.len() != n {
        return IirFilter::new(b, a);
    }
    let filter = IirFilter { b, a, sections: Some(sections) };
    if filter.b.iter().chain(&filter.a).any(|v| !v.is_finite()) || !filter.is_stable() {
        return Err(FilterError::InvalidSpec("design produced a non-finite or unstable filter".into()));
    }
    Ok(filter)
}

/// Direct form II transposed filtering with initial state `zi`.
fn lfilter(f: &IirFilter, x: &[f64], zi: &[f64]) -> Vec<f64> {
    let n = f.order_len();
    let mut b = f.b.clone();
    let mut a = f.a.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    let mut z = zi.to_vec();
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = b[0] * xi + z.first().copied().unwrap_or(0.0);
        for k in 0..n.saturating_sub(1) {
            let next = if k + 1 < n - 1 { z[k + 1] } else { 0.0 };
            z[k] = b[k + 1] * xi + next - a[k + 1] * yi;
        }
        y.push(yi);
    }
    y
}

/// Steady-state initial conditions for a unit step input.
fn lfilter_zi(f: &IirFilter) -> Vec<f64> {
    let n = f.order_len();
    if n < 2 {
        return Vec::new();
    }
    let mut b = f.b.clone();
    let mut a = f.a.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    let m = n - 1;
    // (I - C^T) zi = b[1:] - a[1:] b[0], with C the companion matrix of a.
    let mut mat = vec![vec![0.0; m]; m];
    for i in 0..m {
        mat[i][i] = 1.0;
        mat[i][0] += a[i + 1];
        if i + 1 < m {
            mat[i][i + 1] -= 1.0;
        }
    }
    let rhs: Vec<f64> = (0..m).map(|i| b[i + 1] - a[i + 1] * b[0]).collect();
    solve_dense(mat, rhs)
}

fn solve_dense(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty");
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            if factor != 0.0 {
                for k in col..n {
                    m[row][k] -= factor * m[col][k];
                }
                rhs[row] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    x
}

/// Runs a biquad cascade starting from the steady state for a constant
/// input equal to `x[0]`.
fn sosfilt_steady(sections: &[[f64; 6]], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let mut level = x[0];
    for sec in sections {
        let stage = IirFilter { b: sec[..3].to_vec(), a: sec[3..].to_vec(), sections: None };
        let zi: Vec<f64> = lfilter_zi(&stage).iter().map(|z| z * level).collect();
        y = lfilter(&stage, &y, &zi);
        level *= sec[..3].iter().sum::<f64>() / sec[3..].iter().sum::<f64>();
    }
    y
}

/// Zero-phase forward-backward filtering.
///
/// The signal is extended at both ends by odd reflection over
/// `3 · max(len(a), len(b))` samples and each pass starts from the filter's
/// step-response steady state scaled to the first sample.
pub fn filtfilt(f: &IirFilter, x: &[f64]) -> Result<Vec<f64>, FilterError> {
    let pad = 3 * f.order_len();
    if x.len() <= pad {
        return Err(FilterError::SignalTooShort { len: x.len(), min: pad });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let pass = |x: &[f64]| match &f.sections {
        Some(sections) => sosfilt_steady(sections, x),
        None => {
            let zi: Vec<f64> = lfilter_zi(f).iter().map(|z| z * x[0]).collect();
            lfilter(f, x, &zi)
        }
    };
    let forward = pass(&ext);
    let reversed: Vec<f64> = forward.into_iter().rev().collect();
    let backward = pass(&reversed);
    let mut out: Vec<f64> = backward.into_iter().rev().collect();
    out.truncate(pad + n);
    out.drain(..pad);
    Ok(out)
}

/// Centred moving average of length `window`, applied `passes` times.
///
/// Edges use half-sample symmetric padding (`x[-1] = x[0]`, `x[-2] = x[1]`,
/// ...), so the output has the input's length. Even windows lean one sample
/// to the left.
pub fn moving_average(x: &[f64], window: usize, passes: usize) -> Result<Vec<f64>, FilterError> {
    if window == 0 || passes == 0 {
        return Err(FilterError::InvalidParameter("window and passes must be positive".into()));
    }
    if window > x.len() {
        return Err(FilterError::WindowTooLarge { window, len: x.len() });
    }
    let n = x.len();
    let left = window / 2;
    let right = window - 1 - left;
    let reflect = |i: isize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= n {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut cur = x.to_vec();
    for _ in 0..passes {
        let padded: Vec<f64> =
            (-(left as isize)..(n + right) as isize).map(|i| cur[reflect(i)]).collect();
        cur = padded.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    }
    Ok(cur)
}

/// Bandpass and smoothing settings; the sampling rate comes from each record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub order: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub maf_window: usize,
    pub maf_passes: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { order: 5, f_low: 0.7, f_high: 10.0, maf_window: 5, maf_passes: 1 }
    }
}

impl FilterConfig {
    pub fn bandpass(&self, fs: f64) -> BandpassSpec {
        BandpassSpec::new(self.order, self.f_low, self.f_high, fs)
    }
}

/// Output of [`preprocess_chain`].
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Kept segments concatenated, with their layout attached.
    pub record: Record,
    pub report: CleaningReport,
}

/// Cleans, bandpass-filters and smooths a record.
///
/// Each kept segment is filtered independently and the results are
/// concatenated; the output record carries the segment layout so downstream
/// stages never treat a cleaning gap as continuous signal. Segments too short
/// for the filter's edge padding are dropped.
pub fn preprocess_chain(
    record: &Record,
    policy: &CleaningPolicy,
    filter: &FilterConfig,
) -> Result<Preprocessed, PreprocessError> {
    policy.validate()?;
    let outcome = clean_record(record, policy);
    let mut report = CleaningReport::new(record.record_id(), &outcome);
    let kept = outcome.map_err(PreprocessError::Rejected)?;
    let iir = design_butterworth_bandpass(&filter.bandpass(record.fs()))?;
    let min_len = 3 * iir.order_len() + 1;

    let mut ppg = Vec::new();
    let mut abp = record.abp().map(|_| Vec::new());
    let mut layout = Vec::new();
    let mut used = Vec::new();
    for seg in kept {
        if seg.len() < min_len.max(filter.maf_window) {
            continue;
        }
        let band = filtfilt(&iir, &record.ppg()[seg.start..seg.end])?;
        let smooth = moving_average(&band, filter.maf_window, filter.maf_passes)?;
        let start = ppg.len();
        ppg.extend(smooth);
        layout.push(Segment::new(start, ppg.len()));
        if let (Some(out), Some(src)) = (abp.as_mut(), record.abp()) {
            out.extend_from_slice(&src[seg.start..seg.end]);
        }
        used.push(seg);
    }
    if ppg.is_empty() {
        return Err(PreprocessError::Rejected(Rejection::NoUsableSignal));
    }
    report.kept_segments = used;
    let out = Record::new(record.record_id(), record.subject_id(), record.fs(), ppg, abp)?
        .with_start_time(record.start_time().map(str::to_string))
        .with_segments(Some(layout))?;
    Ok(Preprocessed { record: out, report })
}
