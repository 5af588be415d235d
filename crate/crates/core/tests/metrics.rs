//! Metric implementations against exhaustive threshold enumeration.

mod support;

use fedsis_core::metrics::{self, ThresholdPolicy};
use fedsis_core::Real;
use support::brute;

const TOL: Real = if cfg!(feature = "f32") { 1e-5 } else { 1e-12 };

#[test]
fn metrics_match_brute_force_on_random_sets() {
    let mut rng = brute::rng(2024);
    for case in 0..200 {
        let set = brute::random_set(&mut rng, 1000);
        let (s, l) = (set.scores(), set.labels());
        let auc = metrics::auc(&set).unwrap();
        assert!((auc - brute::auc(s, l)).abs() <= TOL, "case {case}: auc");
        for (policy, min) in [(ThresholdPolicy::Eer, false), (ThresholdPolicy::MinHter, true)] {
            let (h, tau) = metrics::hter(&set, policy).unwrap();
            let want = brute::hter(s, l, min);
            assert!((h - want.hter).abs() <= TOL, "case {case}: {policy:?} {h} vs {}", want.hter);
            match want.threshold {
                Some(t) => assert_eq!(tau, t, "case {case}"),
                None => assert!(s.iter().all(|&x| x < tau), "case {case}"),
            }
        }
        for target in [0.0, 0.01, 0.1, 0.5] {
            let got = metrics::tpr_at_fpr(&set, target, false).unwrap();
            let (tpr, _) = brute::tpr_at_fpr(s, l, target);
            assert!((got.tpr - tpr).abs() <= TOL, "case {case}: tpr@{target}");
        }
    }
}

#[test]
fn metrics_are_invariant_under_monotone_transforms() {
    let mut rng = brute::rng(77);
    for case in 0..50 {
        let set = brute::random_set(&mut rng, 400);
        let f = brute::random_monotone(&mut rng);
        let mapped = set.map_scores(&f).unwrap();
        assert!((metrics::auc(&set).unwrap() - metrics::auc(&mapped).unwrap()).abs() <= TOL, "case {case}");
        for policy in [ThresholdPolicy::Eer, ThresholdPolicy::MinHter] {
            let a = metrics::hter(&set, policy).unwrap().0;
            let b = metrics::hter(&mapped, policy).unwrap().0;
            assert!((a - b).abs() <= TOL, "case {case}: {policy:?}");
        }
        let a = metrics::tpr_at_fpr(&set, 0.1, false).unwrap().tpr;
        let b = metrics::tpr_at_fpr(&mapped, 0.1, false).unwrap().tpr;
        assert!((a - b).abs() <= TOL, "case {case}: tpr");
    }
}
