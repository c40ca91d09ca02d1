use std::collections::BTreeSet;

use pulsebp_core::features::{
    assemble_samples, compute_features, cycles_per_frame, normalize_dataset, read_dataset, write_dataset,
    write_dataset_csv, Dataset, DatasetError, FeatureVector, FrameSample, N_FEATURES, SEQ_LEN,
};
use pulsebp_core::segmentation::{extract_cycles, second_derivative, Cycle, SegmentConfig};
use pulsebp_core::waveform::{synthesize, SynthConfig, SYSTOLIC_PHASE, SYSTOLIC_WIDTH};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: f64 = 62.4;

fn features_of(x: &[f64]) -> (Vec<Cycle>, Vec<FeatureVector>) {
    let sd = second_derivative(x, FS).unwrap();
    let cycles = extract_cycles(x, &sd, FS, &SegmentConfig::default()).unwrap();
    let feats = cycles.iter().map(|c| compute_features(c, x, &sd, FS, 10).unwrap()).collect();
    (cycles, feats)
}

#[test]
fn gaussian_lobe_peak_and_half_rise() {
    // No dicrotic lobe: a pure periodic Gaussian with centre 0.3 P and known σ.
    let hr = 60.0;
    let period = 60.0 / hr;
    let r = synthesize(&SynthConfig { duration_s: 20.0, heart_rate_bpm: hr, notch_depth: 0.0, ..SynthConfig::default() })
        .unwrap();
    let x = r.ppg();
    let (cycles, feats) = features_of(x);
    assert!(!cycles.is_empty());
    let half_width = SYSTOLIC_WIDTH * period * (2.0 * 2f64.ln()).sqrt();
    for (c, f) in cycles.iter().zip(&feats) {
        let beat = (c.peak_idx as f64 / FS / period).floor();
        let start_t = c.start_idx as f64 / FS;
        let centre_t = (beat + SYSTOLIC_PHASE) * period;
        assert!((start_t + f.tp - centre_t).abs() <= 1.0 / FS);
        assert!((start_t + f.trhp - (centre_t - half_width)).abs() <= 1.0 / FS);
        assert_eq!(f.td2, 0.0);
    }
}

#[test]
fn feature_invariants_on_synthetic_pulses() {
    for (hr, depth) in [(55.0, 0.35), (72.0, 0.5), (90.0, 0.6)] {
        let r = synthesize(&SynthConfig { duration_s: 30.0, heart_rate_bpm: hr, notch_depth: depth, ..SynthConfig::default() })
            .unwrap();
        let (_, feats) = features_of(r.ppg());
        for f in feats {
            assert!((f.td1 - (f.tp + f.td3)).abs() <= 1.0 / FS);
            assert!(f.trhp <= f.tp && f.tfh <= f.td3);
            assert!(f.ppgi >= 0.0 && f.sdppgi >= 0.0);
            assert!(f.td1 <= 2.0 && f.pbf >= 1.0);
            assert!(f.td2 > 0.0, "notch expected at depth {depth}");
            for v in f.to_array() {
                assert!(v.is_finite());
            }
        }
    }
}

#[test]
fn amplitude_scaling_and_time_shift() {
    let r = synthesize(&SynthConfig { duration_s: 30.0, ..SynthConfig::default() }).unwrap();
    let x = r.ppg();
    let sd = second_derivative(x, FS).unwrap();
    let cycles = extract_cycles(x, &sd, FS, &SegmentConfig::default()).unwrap();

    let c = 3.7;
    let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
    let sds = second_derivative(&xs, FS).unwrap();

    let shift = 17;
    let mut xt = vec![x[0]; shift];
    xt.extend_from_slice(x);
    let sdt = second_derivative(&xt, FS).unwrap();

    for cy in &cycles {
        let base = compute_features(cy, x, &sd, FS, 10).unwrap();
        let scaled = compute_features(cy, &xs, &sds, FS, 10).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12);
        for (name, a, b) in [
            ("ppgi", c * base.ppgi, scaled.ppgi),
            ("sd_amp", c * base.sd_amp, scaled.sd_amp),
            ("sdppgi", c * base.sdppgi, scaled.sdppgi),
        ] {
            assert!(close(a, b), "{name}: {a} vs {b}");
        }
        for (a, b) in [
            (base.td1, scaled.td1), (base.trhp, scaled.trhp), (base.td2, scaled.td2), (base.tp, scaled.tp),
            (base.tfh, scaled.tfh), (base.td3, scaled.td3), (base.sd_tfhf, scaled.sd_tfhf), (base.td4, scaled.td4),
            (base.pbf, scaled.pbf),
        ] {
            assert!(close(a, b), "{a} vs {b}");
        }

        let moved = Cycle {
            start_idx: cy.start_idx + shift,
            peak_idx: cy.peak_idx + shift,
            notch_idx: cy.notch_idx.map(|n| n + shift),
            end_idx: cy.end_idx + shift,
            sd_peak_idx: cy.sd_peak_idx + shift,
            sd_foot_idx: cy.sd_foot_idx + shift,
            frame_id: cy.frame_id,
        };
        assert_eq!(compute_features(&moved, &xt, &sdt, FS, 10).unwrap(), base);
    }
}

#[test]
fn pbf_counts_cycles_per_frame() {
    let cycles: Vec<Cycle> = (0..25)
        .map(|k| Cycle {
            start_idx: k * 10,
            peak_idx: k * 10 + 3,
            notch_idx: None,
            end_idx: k * 10 + 10,
            sd_peak_idx: k * 10 + 1,
            sd_foot_idx: k * 10,
            frame_id: k / 10,
        })
        .collect();
    let counts = cycles_per_frame(&cycles);
    assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![10, 10, 5]);
}

fn labelled_cycles(n: usize, frame_of: impl Fn(usize) -> usize) -> (Vec<Cycle>, Vec<FeatureVector>, Vec<(f64, f64)>) {
    let cycles: Vec<Cycle> = (0..n)
        .map(|k| Cycle {
            start_idx: k * 60,
            peak_idx: k * 60 + 20,
            notch_idx: None,
            end_idx: (k + 1) * 60,
            sd_peak_idx: k * 60 + 5,
            sd_foot_idx: k * 60,
            frame_id: frame_of(k),
        })
        .collect();
    let feats = (0..n).map(|k| FeatureVector::from_array([k as f64; N_FEATURES])).collect();
    let targets = (0..n).map(|k| (110.0 + k as f64, 70.0 + 0.5 * k as f64)).collect();
    (cycles, feats, targets)
}

#[test]
fn windows_touching_rejected_frame_are_dropped() {
    // Cycles 40..=50 live in frame 1; everything else in frame 0 or 2.
    let (c, f, t) = labelled_cycles(96, |k| if k < 40 { 0 } else if k <= 50 { 1 } else { 2 });
    let samples = assemble_samples(&c, &f, &t, &BTreeSet::from([1]), SEQ_LEN, "r", "s").unwrap();
    let clean_windows = (0..2).filter(|w| {
        let (lo, hi) = (w * 48, w * 48 + 47);
        hi < 40 || lo > 50
    });
    assert!(samples.len() <= clean_windows.count().max(1));
    for s in &samples {
        let first = s.features[0][0] as usize;
        assert!(first + 47 < 40 || first > 50);
    }
}

#[test]
fn cleaning_gap_splits_runs() {
    let (mut c, f, t) = labelled_cycles(96, |_| 0);
    for cy in c.iter_mut().skip(30) {
        cy.start_idx += 500;
        cy.peak_idx += 500;
        cy.end_idx += 500;
        cy.sd_peak_idx += 500;
        cy.sd_foot_idx += 500;
    }
    let samples = assemble_samples(&c, &f, &t, &BTreeSet::new(), SEQ_LEN, "r", "s").unwrap();
    assert_eq!(samples.len(), 1);
    assert_eq!(samples[0].features[0][0], 30.0);
}

#[test]
fn sample_rows_are_temporal_and_targets_are_means() {
    let (c, f, t) = labelled_cycles(100, |_| 0);
    let samples = assemble_samples(&c, &f, &t, &BTreeSet::new(), SEQ_LEN, "rec", "subj").unwrap();
    assert_eq!(samples.len(), 2);
    for (w, s) in samples.iter().enumerate() {
        for (row, v) in s.features.iter().enumerate() {
            assert_eq!(v[0], (w * 48 + row) as f64);
        }
        let mean_sbp = (0..48).map(|k| t[w * 48 + k].0).sum::<f64>() / 48.0;
        assert!((s.sbp - mean_sbp).abs() < 1e-12);
        assert_eq!(s.source_record, "rec");
    }
}

fn random_samples(n: usize, seed: u64) -> Vec<FrameSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| FrameSample {
            features: (0..SEQ_LEN)
                .map(|_| std::array::from_fn(|j| rng.random::<f64>() * (j + 1) as f64 + j as f64))
                .collect(),
            sbp: 100.0 + 40.0 * rng.random::<f64>(),
            dbp: 60.0 + 20.0 * rng.random::<f64>(),
            sample_id: i as u64,
            source_record: format!("rec{:03}", i % 3),
            subject_id: format!("subj{:03}", i % 3),
        })
        .collect()
}

#[test]
fn normalization_statistics() {
    let samples = random_samples(20, 1);
    let (out, stats) = normalize_dataset(&samples).unwrap();
    assert!(stats.flagged.is_empty());
    let rows: Vec<&[f64; N_FEATURES]> = out.iter().flat_map(|s| s.features.iter()).collect();
    let n = rows.len() as f64;
    for j in 0..N_FEATURES {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }
    assert_eq!(stats.apply_all(&samples), out);
    assert!(out.iter().zip(&samples).all(|(a, b)| a.sbp == b.sbp && a.dbp == b.dbp));
}

#[test]
fn dataset_binary_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let ds = Dataset::from_parts(SEQ_LEN, vec![random_samples(7, 2), random_samples(4, 3)]).unwrap();
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.samples()[10].sample_id, 10);
    assert_eq!(back.record_count(), 3);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"PFDS");
    assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 4 + 11 * (48 * 12 * 8 + 8 + 8 + 8));
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_dataset(&path), Err(DatasetError::Corrupt { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_dataset(&path), Err(DatasetError::VersionMismatch { .. })));
}

#[test]
fn dataset_csv_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = Dataset::new(SEQ_LEN, random_samples(5, 4)).unwrap();
    write_dataset_csv(&ds, &path).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 48 * 12 + 2);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[2][48 * 12].parse::<f64>().unwrap(), ds.samples()[2].sbp);
}

#[test]
fn invalid_samples_rejected() {
    let mut s = random_samples(2, 5);
    s[1].dbp = s[1].sbp + 1.0;
    assert!(Dataset::new(SEQ_LEN, s).is_err());
    let mut s = random_samples(2, 6);
    s[0].features.pop();
    assert!(Dataset::new(SEQ_LEN, s).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn triangle_features_track_geometry(rise in 0.1f64..0.5, fall in 0.3f64..1.2, amp in 0.5f64..5.0) {
        let n = ((rise + fall) * FS).floor() as usize + 1;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / FS;
                if t <= rise { amp * t / rise } else { (amp * (1.0 - (t - rise) / fall)).max(0.0) }
            })
            .collect();
        let peak = (0..n).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
        let c = Cycle { start_idx: 0, peak_idx: peak, notch_idx: None, end_idx: n - 1, sd_peak_idx: 0, sd_foot_idx: 0, frame_id: 0 };
        let f = compute_features(&c, &x, &vec![0.0; n], FS, 1).unwrap();
        let tol = 1.0 / FS;
        prop_assert!((f.tp - rise).abs() <= tol);
        prop_assert!((f.trhp - rise / 2.0).abs() <= tol);
        prop_assert!((f.tfh - fall / 2.0).abs() <= tol);
        prop_assert!((f.td1 - (f.tp + f.td3)).abs() <= 1e-12);
        let area = 0.5 * amp * (rise + fall);
        prop_assert!((f.ppgi - area).abs() <= 0.02 * area);
    }
}
