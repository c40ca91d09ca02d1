use pulsebp_core::preprocess::{
    clean_record, design_butterworth_bandpass, filtfilt, moving_average, preprocess_chain, AmplitudeBounds,
    BandpassSpec, CleaningPolicy, FilterConfig, IirFilter, PreprocessError, Rejection,
};
use pulsebp_core::segmentation::{extract_cycles, second_derivative, SegmentConfig};
use pulsebp_core::waveform::{synthesize, Record, Segment, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const FS: f64 = 62.4;

// butter(5, [0.7, 10], btype="band", fs=62.4) from a widely used DSP library.
const REF_B: [f64; 11] = [
    0.006754307887888487, 0.0, -0.03377153943944244, 0.0, 0.06754307887888487, 0.0, -0.06754307887888487, 0.0,
    0.03377153943944244, 0.0, -0.006754307887888487,
];
const REF_A: [f64; 11] = [
    1.0, -6.728525012582226, 20.519281577631943, -37.602427276954934, 46.119581460824065, -39.68785051344258,
    24.277584502710926, -10.412310294169263, 2.9948211128837916, -0.5217969687778743, 0.041641936369536336,
];

fn default_filter() -> IirFilter {
    design_butterworth_bandpass(&BandpassSpec::new(5, 0.7, 10.0, FS)).unwrap()
}

// Real polynomials, lowest power first.
fn pmul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn padd(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, v) in b.iter().enumerate() {
        out[i] += v;
    }
    out
}

fn ppow(a: &[f64], k: usize) -> Vec<f64> {
    (0..k).fold(vec![1.0], |acc, _| pmul(&acc, a))
}

/// Bandpass design through real polynomial substitution: the normalized
/// Butterworth polynomial from its quadratic-factor product, s -> (s² + w0²)/(bw s),
/// then s -> 2fs (z - 1)/(z + 1).
fn polynomial_route(order: usize, f_low: f64, f_high: f64, fs: f64) -> (Vec<f64>, Vec<f64>) {
    let mut butter = if order % 2 == 1 { vec![1.0, 1.0] } else { vec![1.0] };
    for k in 1..=order / 2 {
        let c = -2.0 * ((2 * k + order - 1) as f64 * PI / (2 * order) as f64).cos();
        butter = pmul(&butter, &[1.0, c, 1.0]);
    }
    let k2 = 2.0 * fs;
    let wl = k2 * (PI * f_low / fs).tan();
    let wh = k2 * (PI * f_high / fs).tan();
    let bw = wh - wl;
    let w0sq = wl * wh;

    // Analog: num = bw^n s^n, den = Σ c_i (s² + w0²)^i (bw s)^(n-i).
    let mut num_s = vec![0.0; order + 1];
    num_s[order] = bw.powi(order as i32);
    let mut den_s = vec![0.0];
    for (i, c) in butter.iter().enumerate() {
        let term = pmul(&ppow(&[w0sq, 0.0, 1.0], i), &ppow(&[0.0, bw], order - i));
        den_s = padd(&den_s, &term.iter().map(|v| v * c).collect::<Vec<_>>());
    }
    let m = 2 * order;
    let to_z = |poly: &[f64]| {
        let mut acc = vec![0.0; m + 1];
        for (j, c) in poly.iter().enumerate() {
            let term = pmul(&ppow(&[-k2, k2], j), &ppow(&[1.0, 1.0], m - j));
            acc = padd(&acc, &term.iter().map(|v| v * c).collect::<Vec<_>>());
        }
        acc
    };
    // Highest power of z first == coefficient of z^-k at index k.
    let mut b: Vec<f64> = to_z(&num_s).into_iter().rev().collect();
    let mut a: Vec<f64> = to_z(&den_s).into_iter().rev().collect();
    let a0 = a[0];
    b.iter_mut().for_each(|v| *v /= a0);
    a.iter_mut().for_each(|v| *v /= a0);
    (b, a)
}

fn gain(f: &IirFilter, hz: f64) -> f64 {
    f.response(hz, FS).norm()
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn coefficients_match_reference_design() {
    let f = default_filter();
    assert_eq!(f.b().len(), 11);
    for (x, y) in f.b().iter().zip(REF_B).chain(f.a().iter().zip(REF_A)) {
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
}

#[test]
fn coefficients_match_polynomial_route() {
    for (order, lo, hi, fs) in [(5, 0.7, 10.0, FS), (2, 1.0, 5.0, 50.0), (4, 0.5, 20.0, 125.0), (3, 2.0, 8.0, 62.4)] {
        let f = design_butterworth_bandpass(&BandpassSpec::new(order, lo, hi, fs)).unwrap();
        let (b, a) = polynomial_route(order, lo, hi, fs);
        for (x, y) in f.b().iter().zip(&b).chain(f.a().iter().zip(&a)) {
            assert!((x - y).abs() < 1e-8, "order {order}: {x} vs {y}");
        }
    }
}

#[test]
fn half_power_points_dc_and_centre() {
    let f = default_filter();
    let peak = (1..3000).map(|i| gain(&f, i as f64 * 0.01)).fold(0.0, f64::max);
    let target = peak / 2f64.sqrt();
    let centre = (0.7f64 * 10.0).sqrt();
    let low = bisect(|x| gain(&f, x) - target, 0.05, centre);
    let high = bisect(|x| gain(&f, x) - target, centre, 30.0);
    assert!((low - 0.7).abs() / 0.7 < 0.02, "low edge {low}");
    assert!((high - 10.0).abs() / 10.0 < 0.02, "high edge {high}");
    assert!(gain(&f, 0.0) < 1e-3);
    assert!(gain(&f, centre) >= 0.99 * peak);
}

#[test]
fn poles_inside_unit_circle() {
    for order in 1..=8 {
        let f = design_butterworth_bandpass(&BandpassSpec::new(order, 0.7, 10.0, FS)).unwrap();
        let poles = f.poles();
        assert_eq!(poles.len(), 2 * order);
        assert!(poles.iter().all(|p| p.norm() < 1.0));
    }
}

#[test]
fn zero_in_zero_out() {
    let f = default_filter();
    assert!(filtfilt(&f, &vec![0.0; 500]).unwrap().iter().all(|&v| v == 0.0));
}

fn sine(hz: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * hz * i as f64 / FS).sin()).collect()
}

fn local_max_indices(x: &[f64]) -> Vec<usize> {
    (1..x.len() - 1).filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1]).collect()
}

#[test]
fn in_band_sinusoid_keeps_gain_and_phase() {
    let x = sine(2.0, (10.0 * FS) as usize);
    let y = filtfilt(&default_filter(), &x).unwrap();
    // Skip the 2 s edge transients; the steady-state gain is what is checked.
    let mid = 125..x.len() - 125;
    let amp = y[mid.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((0.95..=1.05).contains(&amp), "amplitude {amp}");
    let px: Vec<usize> = local_max_indices(&x).into_iter().filter(|i| mid.contains(i)).collect();
    let py: Vec<usize> = local_max_indices(&y).into_iter().filter(|i| mid.contains(i)).collect();
    assert_eq!(px.len(), py.len());
    for (a, b) in px.iter().zip(&py) {
        assert!(a.abs_diff(*b) < 1);
    }
}

#[test]
fn dc_offset_is_removed() {
    let x: Vec<f64> = sine(2.0, (10.0 * FS) as usize).iter().map(|v| v + 5.0).collect();
    let y = filtfilt(&default_filter(), &x).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
}

#[test]
fn moving_average_reduces_white_noise_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>() - 0.5).collect();
    let y = moving_average(&x, 5, 1).unwrap();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    // Expected ratio is 1/5; the 99% band over 1e5 samples is far narrower than this margin.
    let ratio = var(&y) / var(&x);
    assert!(ratio < 0.25, "ratio {ratio}");
}

fn synth(duration_s: f64, noise_std: f64, seed: u64) -> Record {
    synthesize(&SynthConfig { duration_s, noise_std, seed, ..SynthConfig::default() }).unwrap()
}

#[test]
fn ten_minute_record_is_too_short() {
    let out = clean_record(&synth(600.0, 0.0, 1), &CleaningPolicy::default());
    assert!(matches!(out, Err(Rejection::TooShort { .. })));
    let chain = preprocess_chain(&synth(600.0, 0.0, 1), &CleaningPolicy::default(), &FilterConfig::default());
    assert!(matches!(chain, Err(PreprocessError::Rejected(Rejection::TooShort { .. }))));
}

#[test]
fn clean_twenty_minute_record_is_one_segment() {
    let r = synth(1200.0, 0.02, 2);
    assert_eq!(clean_record(&r, &CleaningPolicy::default()).unwrap(), vec![Segment::new(0, r.len())]);
}

#[test]
fn flat_middle_span_is_excised() {
    let r = synth(1200.0, 0.02, 3);
    let (a, b) = ((540.0 * FS) as usize, (660.0 * FS) as usize);
    let mut ppg = r.ppg().to_vec();
    ppg[a..b].iter_mut().for_each(|v| *v = 0.5);
    let r = Record::new("flat", "s", FS, ppg, None).unwrap();
    let policy = CleaningPolicy::default();
    let segs = clean_record(&r, &policy).unwrap();
    assert_eq!(segs.len(), 2);
    let window = (policy.flatline_window_s * FS).round() as usize;
    assert_eq!(segs[0].start, 0);
    assert!(segs[0].end.abs_diff(a) <= window);
    assert!(segs[1].start.abs_diff(b) <= window);
    assert_eq!(segs[1].end, r.len());
}

#[test]
fn out_of_range_windows_are_dropped() {
    let r = synth(960.0, 0.0, 4);
    let mut ppg = r.ppg().to_vec();
    let a = (100.0 * FS) as usize;
    ppg[a..a + 300].iter_mut().for_each(|v| *v += 40.0);
    let r = Record::new("spike", "s", FS, ppg, None).unwrap();
    let policy = CleaningPolicy { amplitude: AmplitudeBounds::Fixed { low: -2.0, high: 3.0 }, ..CleaningPolicy::default() };
    let segs = clean_record(&r, &policy).unwrap();
    assert_eq!(segs.len(), 2);
    assert!(segs[0].end <= a && segs[1].start >= a + 300);
}

#[test]
fn cleaning_is_idempotent_on_kept_segments() {
    let r = synth(1000.0, 0.02, 5);
    let mut ppg = r.ppg().to_vec();
    let a = (300.0 * FS) as usize;
    ppg[..a].iter_mut().for_each(|v| *v = 0.0);
    let r = Record::new("head", "s", FS, ppg, None).unwrap();
    let policy = CleaningPolicy { min_duration_s: 60.0, ..CleaningPolicy::default() };
    let segs = clean_record(&r, &policy).unwrap();
    assert_eq!(segs.len(), 1);
    let kept = Record::new("kept", "s", FS, r.ppg()[segs[0].start..segs[0].end].to_vec(), None).unwrap();
    assert_eq!(clean_record(&kept, &policy).unwrap(), vec![Segment::new(0, kept.len())]);
}

fn total_variation(x: &[f64]) -> f64 {
    x.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

#[test]
fn chain_smooths_noisy_record() {
    let r = synth(960.0, 0.05, 6);
    let out = preprocess_chain(&r, &CleaningPolicy::default(), &FilterConfig::default()).unwrap();
    assert_eq!(out.record.len(), r.len());
    assert!(total_variation(out.record.ppg()) < total_variation(r.ppg()));
    assert_eq!(out.record.abp(), r.abp(), "ABP must not be filtered");
    assert!(!out.report.rejected);
}

#[test]
fn chain_preserves_cycle_count() {
    let r = synth(960.0, 0.0, 7);
    let out = preprocess_chain(&r, &CleaningPolicy::default(), &FilterConfig::default()).unwrap();
    let count = |x: &[f64]| {
        let sd = second_derivative(x, FS).unwrap();
        extract_cycles(x, &sd, FS, &SegmentConfig::default()).unwrap().len()
    };
    assert_eq!(count(r.ppg()), count(out.record.ppg()));
}

#[test]
fn chain_keeps_gap_layout() {
    let r = synth(1200.0, 0.02, 8);
    let (a, b) = ((540.0 * FS) as usize, (660.0 * FS) as usize);
    let mut ppg = r.ppg().to_vec();
    ppg[a..b].iter_mut().for_each(|v| *v = 0.5);
    let r = Record::new("gap", "s", FS, ppg, r.abp().map(<[f64]>::to_vec)).unwrap();
    let out = preprocess_chain(&r, &CleaningPolicy::default(), &FilterConfig::default()).unwrap();
    let layout = out.record.segments().unwrap();
    assert_eq!(layout.len(), 2);
    assert_eq!(layout[0].start, 0);
    assert_eq!(layout[0].end, layout[1].start);
    assert_eq!(layout[1].end, out.record.len());
    assert_eq!(out.report.kept_segments.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtfilt_is_linear(
        xs in prop::collection::vec(-10.0f64..10.0, 200),
        ys in prop::collection::vec(-10.0f64..10.0, 200),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let f = default_filter();
        let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
        let lhs = filtfilt(&f, &mix).unwrap();
        let fx = filtfilt(&f, &xs).unwrap();
        let fy = filtfilt(&f, &ys).unwrap();
        let scale = lhs.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        for i in 0..lhs.len() {
            let rhs = a * fx[i] + b * fy[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-9 * scale, "err {} scale {}", (lhs[i] - rhs).abs(), scale);
        }
    }

    #[test]
    fn in_band_sinusoids_have_zero_lag(hz in 1.0f64..8.0, phase in 0.0f64..6.28) {
        let n = (12.0 * FS) as usize;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * hz * i as f64 / FS + phase).sin()).collect();
        let y = filtfilt(&default_filter(), &x).unwrap();
        let mid = 100..n - 100;
        let xcorr = |lag: i64| -> f64 {
            mid.clone().map(|i| x[i] * y[(i as i64 + lag) as usize]).sum()
        };
        let best = (-5..=5).max_by(|&p, &q| xcorr(p).total_cmp(&xcorr(q))).unwrap();
        prop_assert_eq!(best, 0);
    }

    #[test]
    fn designed_filters_are_stable(order in 1usize..=8, lo in 0.2f64..5.0, width in 1.0f64..20.0) {
        let hi = (lo + width).min(FS / 2.0 - 0.5);
        prop_assume!(lo < hi);
        let f = design_butterworth_bandpass(&BandpassSpec::new(order, lo, hi, FS)).unwrap();
        prop_assert!(f.is_stable());
    }
}
