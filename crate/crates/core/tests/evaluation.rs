use pulsebp_core::evaluation::{
    aami_check, bhs_grade, bland_altman, cumulative_error_pct, emit_report, evaluate, metrics, AamiClause, BhsGrade,
    EvalError, EvalReport, CUM_THRESHOLDS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn hand_computed_metrics() {
    let m = metrics(&[100.0, 120.0, 110.0], &[102.0, 118.0, 111.0]).unwrap();
    assert!((m.me - (-1.0 / 3.0)).abs() < 1e-15);
    assert!((m.mae - 5.0 / 3.0).abs() < 1e-15);
    assert!((m.rmse - 3f64.sqrt()).abs() < 1e-15);
    // SSE = 9, SST = 200.
    assert!((m.r2 - (1.0 - 9.0 / 200.0)).abs() < 1e-15);
}

#[test]
fn cumulative_percentages_by_hand() {
    let t = [0.0; 4];
    let p = [1.0, 6.0, 12.0, 20.0];
    assert_eq!(cumulative_error_pct(&t, &p, CUM_THRESHOLDS).unwrap(), [25.0, 50.0, 75.0]);
    assert_eq!(cumulative_error_pct(&t, &t, CUM_THRESHOLDS).unwrap(), [100.0; 3]);
    assert!(matches!(cumulative_error_pct(&[], &[], CUM_THRESHOLDS), Err(EvalError::EmptyInput)));
}

#[test]
fn aami_examples() {
    assert!(aami_check(360, 0.138, 1.93).pass);
    assert!(aami_check(360, -0.166, 1.58).pass);
    assert_eq!(aami_check(50, 1.0, 1.0).reasons, vec![AamiClause::Records]);
    assert_eq!(aami_check(100, 6.0, 2.0).reasons, vec![AamiClause::Me]);
    assert!(!aami_check(85, 0.0, 0.0).pass);
    assert!(!aami_check(100, 5.0, 0.0).pass);
    assert!(!aami_check(100, 0.0, 8.0).pass);
}

#[test]
fn bhs_examples_and_boundaries() {
    assert_eq!(bhs_grade([96.68, 99.53, 99.93]).unwrap(), BhsGrade::A);
    assert_eq!(bhs_grade([97.40, 99.54, 99.88]).unwrap(), BhsGrade::A);
    assert_eq!(bhs_grade([45.0, 70.0, 86.0]).unwrap(), BhsGrade::C);
    assert_eq!(bhs_grade([30.0, 50.0, 70.0]).unwrap(), BhsGrade::Fail);
    assert_eq!(bhs_grade([60.0, 85.0, 95.0]).unwrap(), BhsGrade::A);
    assert_eq!(bhs_grade([50.0, 75.0, 90.0]).unwrap(), BhsGrade::B);
    assert_eq!(bhs_grade([40.0, 65.0, 85.0]).unwrap(), BhsGrade::C);
    assert_eq!(bhs_grade([59.99, 85.0, 95.0]).unwrap(), BhsGrade::B);
    assert_eq!(bhs_grade([39.99, 65.0, 85.0]).unwrap(), BhsGrade::Fail);
}

#[test]
fn bland_altman_by_hand() {
    let t = [10.0, 10.0, 10.0, 10.0];
    let p = [11.0, 9.0, 10.0, 10.0];
    let ba = bland_altman(&t, &p).unwrap();
    let sd = (2.0f64 / 3.0).sqrt();
    assert!(ba.mean_diff.abs() < 1e-15);
    assert!((ba.sd - sd).abs() < 1e-15);
    assert!((ba.loa_high - 1.96 * sd).abs() < 1e-12 && (ba.loa_low + 1.96 * sd).abs() < 1e-12);
    assert!((ba.loa_high - 1.6003).abs() < 1e-4);
    let same = bland_altman(&t, &t).unwrap();
    assert_eq!((same.mean_diff, same.loa_low, same.loa_high), (0.0, 0.0, 0.0));
    assert!(bland_altman(&[1.0], &[1.0]).is_err());
}

#[test]
fn gaussian_differences_recover_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.26, 1.97).unwrap();
    let t: Vec<f64> = (0..10_000).map(|i| 100.0 + (i % 50) as f64).collect();
    let p: Vec<f64> = t.iter().map(|v| v + noise.sample(&mut rng)).collect();
    let ba = bland_altman(&t, &p).unwrap();
    assert!((ba.mean_diff - 0.26).abs() <= 0.05);
    assert!((ba.loa_low - (0.26 - 1.96 * 1.97)).abs() <= 0.1);
    assert!((ba.loa_high - (0.26 + 1.96 * 1.97)).abs() <= 0.1);
    let inside = ba.pairs.iter().filter(|(_, d)| *d >= ba.loa_low && *d <= ba.loa_high).count() as f64 / 1e4;
    assert!((inside - 0.95).abs() <= 0.01, "coverage {inside}");
}

fn sample_pairs() -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 3.0).unwrap();
    let t: Vec<(f64, f64)> = (0..200).map(|i| (100.0 + (i % 60) as f64, 60.0 + (i % 40) as f64)).collect();
    let p = t.iter().map(|(s, d)| (s + noise.sample(&mut rng), d + noise.sample(&mut rng))).collect();
    (t, p)
}

#[test]
fn report_files_and_json_round_trip() {
    let (t, p) = sample_pairs();
    let report = evaluate(&t, &p, 20).unwrap();
    assert_eq!(report.sbp.histogram.iter().map(|b| b.count).sum::<usize>(), 200);
    assert!(!report.sbp.aami.pass);
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    for name in ["report.json", "error_hist_sbp.csv", "scatter_dbp.csv", "residuals_sbp.csv", "bland_altman_dbp.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.sbp.metrics(), report.sbp.metrics());
    assert_eq!(back.dbp.metrics(), report.dbp.metrics());
    assert_eq!(back.sbp.bland_altman.loa_high, report.sbp.bland_altman.loa_high);
    assert_eq!(back.schema, "pf-report-v1");
    let scatter = std::fs::read_to_string(dir.path().join("scatter_sbp.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 201);
}

#[test]
fn empty_predictions_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(matches!(evaluate(&[], &[], 0), Err(EvalError::EmptyInput)));
    assert!(!out.exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn error_identities(errors in prop::collection::vec(-50.0f64..50.0, 2..200)) {
        let t: Vec<f64> = (0..errors.len()).map(|i| 100.0 + i as f64).collect();
        let p: Vec<f64> = t.iter().zip(&errors).map(|(a, e)| a - e).collect();
        let m = metrics(&t, &p).unwrap();
        let tol = 1e-9 * m.rmse.max(1e-300);
        prop_assert!(m.rmse + tol >= m.mae && m.mae + tol >= m.me.abs());
        prop_assert!((m.rmse.powi(2) - (m.me.powi(2) + m.std.powi(2))).abs() <= 1e-9 * m.rmse.powi(2).max(1e-300));
        prop_assert!(m.r2 <= 1.0);
    }

    #[test]
    fn r2_is_one_only_for_perfect_fit(t in prop::collection::vec(0.0f64..200.0, 2..50), k in 0usize..50, e in 0.01f64..5.0) {
        prop_assume!(t.iter().any(|v| *v != t[0]));
        prop_assert_eq!(metrics(&t, &t).unwrap().r2, 1.0);
        let mut p = t.clone();
        let k = k % p.len();
        p[k] += e;
        prop_assert!(metrics(&t, &p).unwrap().r2 < 1.0);
    }

    #[test]
    fn bhs_is_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0, c in 0.0f64..100.0, bump in 0.0f64..30.0, which in 0usize..3) {
        let mut v = [a, b, c];
        v.sort_by(f64::total_cmp);
        let before = bhs_grade(v).unwrap();
        let mut raised = v;
        for x in raised.iter_mut().skip(which) {
            *x = (*x + bump).min(100.0);
        }
        let after = bhs_grade(raised).unwrap();
        prop_assert!(after <= before, "{:?} -> {:?}", before, after);
    }

    #[test]
    fn bland_altman_translates(t in prop::collection::vec(50.0f64..150.0, 2..40), c in -10.0f64..10.0) {
        let p: Vec<f64> = t.iter().enumerate().map(|(i, v)| v + (i % 3) as f64 - 1.0).collect();
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        let a = bland_altman(&t, &p).unwrap();
        let b = bland_altman(&t, &shifted).unwrap();
        prop_assert!((b.mean_diff - a.mean_diff - c).abs() < 1e-9);
        prop_assert!((b.loa_low - a.loa_low - c).abs() < 1e-9);
        prop_assert!((b.loa_high - a.loa_high - c).abs() < 1e-9);
    }

    #[test]
    fn cumulative_percentages_are_ordered(errors in prop::collection::vec(-30.0f64..30.0, 1..100)) {
        let t = vec![0.0; errors.len()];
        let c = cumulative_error_pct(&t, &errors, CUM_THRESHOLDS).unwrap();
        prop_assert!(0.0 <= c[0] && c[0] <= c[1] && c[1] <= c[2] && c[2] <= 100.0);
    }
}
