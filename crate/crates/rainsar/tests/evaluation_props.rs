//! Metric-oracle tests for the evaluation module.
//!
//! Precision/recall/F1 are re-derived by direct counting over random
//! vectors, the classic seven-sample confusion case pins F1 = 4/7 exactly,
//! the bootstrap interval's empirical coverage on Bernoulli means is
//! measured against its nominal level, and prevalence reweighting must be a
//! no-op when the target prevalence equals the observed one.

use rainsar::evaluation::{
    bootstrap_mean_ci, prf, scatter_stats, wind_binned_metrics, PatchEval,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn prf_matches_direct_counting_on_a_thousand_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0_47F5);
    for case in 0..1000 {
        let n = rng.gen_range(1..200);
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();

        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (t, p) in truth.iter().zip(&pred) {
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let expect_precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let expect_recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        let expect_f1 =
            (2 * tp + fp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);

        let got = prf(&truth, &pred).unwrap();
        assert_eq!(got.precision, expect_precision, "case {case}: precision");
        assert_eq!(got.recall, expect_recall, "case {case}: recall");
        assert_eq!(got.f1, expect_f1, "case {case}: F1");
    }
}

#[test]
fn seven_sample_hand_case_scores_f1_of_four_sevenths() {
    // tp = 2, fn = 2, fp = 1, tn = 2.
    let truth = [true, true, true, true, false, false, false];
    let pred = [true, true, false, false, true, false, false];
    let got = prf(&truth, &pred).unwrap();
    assert_eq!(got.precision, Some(2.0 / 3.0));
    assert_eq!(got.recall, Some(0.5));
    assert_eq!(got.f1, Some(4.0 / 7.0));
}

#[test]
fn degenerate_ratios_are_reported_absent_not_zero() {
    // Nothing predicted positive: precision undefined, recall 0.
    let got = prf(&[true, true, false], &[false, false, false]).unwrap();
    assert_eq!(got.precision, None);
    assert_eq!(got.recall, Some(0.0));
    assert_eq!(got.f1, Some(0.0));

    // Nothing true positive anywhere: all three undefined.
    let got = prf(&[false, false], &[false, false]).unwrap();
    assert_eq!(got.precision, None);
    assert_eq!(got.recall, None);
    assert_eq!(got.f1, None);
}

#[test]
fn bootstrap_interval_covers_the_bernoulli_mean_at_its_nominal_level() {
    // 1000 independent experiments: n = 400 coin flips with p = 0.5, a 95%
    // bootstrap interval on the sample mean each time. Empirical coverage
    // of the true mean must sit in the accepted band around nominal.
    let p = 0.5;
    let n = 400;
    let trials = 1000;
    let mut covered = 0usize;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB007_0000 + t as u64);
        let values: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(p)))).collect();
        let (lo, hi) = bootstrap_mean_ci(&values, 500, 0.95, 0xB007_5EED + t as u64)
            .expect("non-empty sample always yields an interval");
        if lo <= p && p <= hi {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;
    assert!(
        (0.93..=0.97).contains(&coverage),
        "empirical coverage {coverage:.4} outside [0.93, 0.97]"
    );
}

fn patch(wind: f64, truth: bool, pred: bool) -> PatchEval {
    PatchEval {
        iw_id: "IW-X".into(),
        wind_prior_ms: wind,
        center_lat: 30.0,
        center_lon: -80.0,
        station_id: None,
        truth_flag: truth,
        pred_flag: pred,
        max_true: if truth { 20.0 } else { 0.0 },
        max_pred: if pred { 18.0 } else { 0.1 },
        mean_true: if truth { 2.0 } else { 0.0 },
        mean_pred: if pred { 1.8 } else { 0.05 },
        truth_above: vec![],
        pred_above: vec![],
    }
}

#[test]
fn reweighting_to_the_observed_prevalence_changes_nothing() {
    // One wind bin holding 5 rainy and 15 dry patches: observed prevalence
    // is exactly 0.25. Asking the weighting to move prevalence onto 0.25
    // must therefore reproduce the unweighted metrics bit for bit.
    let mut patches = Vec::new();
    for i in 0..20 {
        let truth = i < 5;
        let pred = if truth { i % 5 != 0 } else { i % 7 == 0 };
        patches.push(patch(5.0, truth, pred));
    }
    let bins = wind_binned_metrics(&patches, &[4.0, 8.0], Some(0.25), 200, 0.95, 3).unwrap();
    assert_eq!(bins.len(), 1);
    let bin = &bins[0];
    let unweighted = bin.unweighted.expect("populated bin");
    let weighted = bin.weighted.expect("two-class bin");
    assert_eq!(weighted.precision, unweighted.precision);
    assert_eq!(weighted.recall, unweighted.recall);
    assert_eq!(weighted.f1, unweighted.f1);
}

#[test]
fn reweighting_to_a_different_prevalence_moves_precision_but_not_recall() {
    // Per-class weights rescale tp and fn together, so recall (a ratio
    // within the true-positive class) is invariant; precision mixes the
    // classes and must move when the prevalence target does.
    let mut patches = Vec::new();
    for i in 0..40 {
        let truth = i < 10;
        let pred = if truth { i % 10 < 7 } else { i % 3 == 0 };
        patches.push(patch(5.0, truth, pred));
    }
    let base = wind_binned_metrics(&patches, &[4.0, 8.0], Some(0.25), 200, 0.95, 3).unwrap();
    let moved = wind_binned_metrics(&patches, &[4.0, 8.0], Some(0.6), 200, 0.95, 3).unwrap();
    let (b, m) = (
        base[0].weighted.expect("two-class bin"),
        moved[0].weighted.expect("two-class bin"),
    );
    assert!((b.recall.unwrap() - m.recall.unwrap()).abs() < 1e-12);
    assert!(
        (b.precision.unwrap() - m.precision.unwrap()).abs() > 0.05,
        "precision should respond to the prevalence target: {b:?} vs {m:?}"
    );
}

#[test]
fn scatter_statistics_recover_a_known_linear_relation() {
    // pred = 2·truth + 1 exactly: slope 2, perfect correlation, and RMSE
    // equal to the RMS of (truth + 1).
    let truth: Vec<f64> = (0..50).map(|i| i as f64 * 0.5).collect();
    let pred: Vec<f64> = truth.iter().map(|t| 2.0 * t + 1.0).collect();
    let s = scatter_stats(&truth, &pred).unwrap();
    assert!((s.pcc - 1.0).abs() < 1e-12);
    assert!((s.slope - 2.0).abs() < 1e-12);
    let expected_rmse =
        (truth.iter().map(|t| (t + 1.0) * (t + 1.0)).sum::<f64>() / 50.0).sqrt();
    assert!((s.rmse_mmh - expected_rmse).abs() < 1e-12);
    assert_eq!(s.n, 50);
}
