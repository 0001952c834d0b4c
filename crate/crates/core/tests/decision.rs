use oodcert::certificates::{CertificateRecord, Method};
use oodcert::decision::{
    certificate_boundary, classify, error_boundary, fit_error_curve, predict_error, quadrant_metrics, DecisionBoundary,
    FineLabel, Label,
};
use oodcert::rng::labeled_stream;
use oodcert::stats::percentile;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn boundary(median: f64, std: f64, sign: f64, e_b: f64) -> DecisionBoundary {
    DecisionBoundary {
        threshold: median + sign * 1.5 * std,
        error_threshold: Some(e_b),
        median,
        std,
        alpha: 1.5,
        beta: 5.0,
        sign,
        count: 32,
    }
}

fn record(id: u64, cert: f64, err: f64, rel: f64) -> CertificateRecord {
    CertificateRecord::new(id, Method::Jlbc, cert).with_error(err, rel)
}

#[test]
fn boundary_examples() {
    let t = certificate_boundary(&[1.0, 2.0, 3.0, 4.0, 5.0], 1.5, -1.0).unwrap();
    assert!((t - 0.878_68).abs() < 1e-5);
    let e: Vec<f64> = (0..100).map(f64::from).collect();
    assert!((error_boundary(&e, 5.0).unwrap() - 94.05).abs() < 1e-9);
    assert!((percentile(&[0.0, 1.0, 2.0, 3.0], 75.0) - 2.25).abs() < 1e-12);
    let b = boundary(0.0, 1.0, -1.0, 0.0);
    assert_eq!(classify(b.threshold, &b).0, Label::Id);
    assert_eq!(classify(-2.0, &b).1, FineLabel::Cd);
    assert_eq!(classify(-4.0, &b).1, FineLabel::Ood);
}

#[test]
fn hand_placed_quadrants() {
    // l_b = −1.5, e_b = 1.0. Certificates below −1.5 are flagged OOD.
    let b = boundary(0.0, 1.0, -1.0, 1.0);
    let recs = vec![
        record(0, -3.0, 2.0, 1.5),  // TP, critical
        record(1, -2.0, 1.5, 0.2),  // TP
        record(2, -2.5, 0.5, 0.1),  // FP
        record(3, 0.0, 0.1, 0.1),   // TN
        record(4, 1.0, 1.0, 0.1),   // TN (tie at e_b counts as small)
        record(5, -1.5, 0.2, 0.1),  // TN (on l_b)
        record(6, 0.5, 3.0, 2.0),   // FN, critical
        record(7, -1.0, 1.2, 0.3),  // FN
        record(8, 2.0, 0.0, 0.0),   // TN
        record(9, -4.0, 5.0, 1.0),  // TP, critical
    ];
    let m = quadrant_metrics(&recs, &b).unwrap();
    let (tp, fp, tn, fn_) = (3.0, 1.0, 4.0, 2.0);
    assert_eq!((m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_), (3, 1, 4, 2));
    assert_eq!(m.acc, (tp + tn) / 10.0);
    assert_eq!(m.fpr, fp / (fp + tn));
    assert_eq!(m.fnr, fn_ / (fn_ + tp));
    assert_eq!(m.fdr, fp / (fp + tp));
    assert_eq!(m.arcb, Some(2.0 / 3.0));
}

#[test]
fn perfect_and_degenerate_metrics() {
    let b = boundary(0.0, 1.0, -1.0, 1.0);
    let recs = vec![record(0, -5.0, 2.0, 0.5), record(1, 0.0, 0.5, 0.5)];
    let m = quadrant_metrics(&recs, &b).unwrap();
    assert_eq!((m.acc, m.fpr, m.fdr, m.fnr), (1.0, 0.0, 0.0, 0.0));
    assert_eq!(m.arcb, None);
    let none = vec![record(0, 0.0, 0.5, 0.5)];
    let m = quadrant_metrics(&none, &b).unwrap();
    assert_eq!((m.fnr, m.fdr), (0.0, 0.0));
    let missing = vec![CertificateRecord::new(0, Method::Jlbc, 0.0)];
    assert!(quadrant_metrics(&missing, &b).is_err());
}

#[test]
fn error_fit_examples() {
    let x: Vec<f64> = (0..64).map(|i| -3.0 + 0.1 * i as f64).collect();
    let y: Vec<f64> = x.iter().map(|&v| 2.0 * (-0.5 * v).exp() + 0.1).collect();
    let f = fit_error_curve(&x, &y, 75.0).unwrap();
    assert!((f.a - 2.0).abs() < 1e-4 && (f.b - 0.5).abs() < 1e-4 && (f.c - 0.1).abs() < 1e-4, "{f:?}");
    assert!((predict_error(&f, 0.0).0 - 2.1).abs() < 1e-4);

    let flat = fit_error_curve(&x, &vec![0.7; 64], 75.0).unwrap();
    assert!(flat.a == 0.0 || flat.b == 0.0);
    assert!(flat.band < 1e-12);
}

#[test]
fn error_fit_on_likelihood_scale_certificates() {
    // Certificates of order −10³ with a shallow decay: the fold into `a` overflows.
    let x: Vec<f64> = (0..40).map(|i| -3000.0 + 5.0 * i as f64).collect();
    let y: Vec<f64> = x.iter().map(|&v| 0.3 * (-0.02 * (v + 2900.0)).exp() + 0.05).collect();
    let f = fit_error_curve(&x, &y, 75.0).unwrap();
    for (&xi, &yi) in x.iter().zip(&y) {
        assert!((f.eval(xi) - yi).abs() < 1e-6 * (1.0 + yi), "{f:?}");
    }
}

#[test]
fn noisy_fit_band_covers_most_points() {
    let mut rng = labeled_stream(2, "fit", 0);
    let x: Vec<f64> = (0..64).map(|i| i as f64 / 16.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (1.5 * (-1.2 * v).exp() + 0.2 + 0.02 * e).max(0.0)
        })
        .collect();
    let f = fit_error_curve(&x, &y, 75.0).unwrap();
    let inside = x
        .iter()
        .zip(&y)
        .filter(|(&xi, &yi)| {
            let (_, lo, hi) = predict_error(&f, xi);
            lo <= yi && yi <= hi
        })
        .count();
    assert!(inside >= 48, "{inside}");
}

fn boundaries() -> impl Strategy<Value = DecisionBoundary> {
    (-10.0f64..10.0, 0.0f64..5.0, prop::bool::ANY, 0.0f64..3.0).prop_map(|(m, s, neg, e)| {
        boundary(m, s, if neg { -1.0 } else { 1.0 }, e)
    })
}

proptest! {
    #[test]
    fn classify_is_monotone(b in boundaries(), c in -30.0f64..30.0, up in 0.0f64..10.0) {
        let (lo, hi) = (classify(c, &b).0, classify(c + up, &b).0);
        if b.sign < 0.0 {
            prop_assert!(!(lo == Label::Id && hi == Label::Ood));
        } else {
            prop_assert!(!(lo == Label::Ood && hi == Label::Id));
        }
    }

    #[test]
    fn fine_labels_partition(b in boundaries(), c in -30.0f64..30.0) {
        let (coarse, fine) = classify(c, &b);
        prop_assert_eq!(coarse == Label::Id, fine == FineLabel::Id);
        let cd = if b.sign < 0.0 {
            b.median - 3.0 * b.std < c && c < b.median - 1.5 * b.std
        } else {
            b.median + 1.5 * b.std < c && c < b.median + 3.0 * b.std
        };
        if fine != FineLabel::Id {
            prop_assert_eq!(fine == FineLabel::Cd, cd);
        }
    }

    #[test]
    fn metrics_match_enumeration(
        b in boundaries(),
        rows in prop::collection::vec((-20.0f64..20.0, 0.0f64..3.0, 0.0f64..2.0), 1..1000),
    ) {
        let recs: Vec<_> = rows.iter().enumerate().map(|(i, &(c, e, r))| record(i as u64, c, e, r)).collect();
        let m = quadrant_metrics(&recs, &b).unwrap();
        let e_b = b.error_threshold.unwrap();
        let flagged = |c: f64| if b.sign < 0.0 { c < b.threshold } else { c > b.threshold };
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        let (mut crit, mut crit_hit) = (0usize, 0usize);
        for &(c, e, r) in &rows {
            match (flagged(c), e > e_b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
            if r >= 1.0 {
                crit += 1;
                crit_hit += usize::from(flagged(c));
            }
        }
        prop_assert_eq!((m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_), (tp, fp, tn, fn_));
        prop_assert_eq!(m.counts.total(), rows.len());
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        prop_assert_eq!(m.acc, div(tp + tn, rows.len()));
        prop_assert_eq!(m.fpr, div(fp, fp + tn));
        prop_assert_eq!(m.fnr, div(fn_, fn_ + tp));
        prop_assert_eq!(m.fdr, div(fp, fp + tp));
        prop_assert_eq!(m.arcb, (crit > 0).then(|| div(crit_hit, crit)));
    }
}

#[test]
fn boundary_stable_across_decision_set_sizes() {
    let mut stable = 0;
    for rep in 0..50u64 {
        let mut rng = labeled_stream(11, "stability", rep);
        let draw = |n: usize, rng: &mut _| -> Vec<f64> {
            (0..n).map(|_| { let e: f64 = StandardNormal.sample(rng); -100.0 + 4.0 * e }).collect()
        };
        let small = draw(32, &mut rng);
        let large = draw(128, &mut rng);
        let a = certificate_boundary(&small, 1.5, -1.0).unwrap();
        let b = certificate_boundary(&large, 1.5, -1.0).unwrap();
        let spread = oodcert::stats::std_pop(&small);
        stable += usize::from((a - b).abs() < spread);
    }
    assert!(stable >= 45, "{stable}/50");
}
