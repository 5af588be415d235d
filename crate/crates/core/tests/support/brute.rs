//! Metric definitions evaluated by exhaustive enumeration.

#![allow(dead_code)]

use fedsis_core::metrics::ScoreSet;
use fedsis_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise AUC in percent: bonafide above attack counts 1, ties ½.
pub fn auc(scores: &[Real], labels: &[u8]) -> Real {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &b) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &a) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            twice += if b > a { 2 } else if b == a { 1 } else { 0 };
        }
    }
    100.0 * twice as Real / (2 * pairs) as Real
}

/// (false accepts, false rejects, attacks, bonafide) when accepting `s ≥ τ`,
/// with `None` meaning a threshold above every score.
fn counts(scores: &[Real], labels: &[u8], tau: Option<Real>) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        let accept = tau.is_some_and(|t| s >= t);
        if l == 0 {
            c.2 += 1;
            c.0 += accept as u64;
        } else {
            c.3 += 1;
            c.1 += !accept as u64;
        }
    }
    c
}

/// Every candidate threshold, ascending, `None` last.
fn candidates(scores: &[Real]) -> Vec<Option<Real>> {
    let mut t: Vec<Real> = scores.to_vec();
    t.sort_by(Real::total_cmp);
    t.dedup();
    t.into_iter().map(Some).chain([None]).collect()
}

pub struct BruteHter {
    pub hter: Real,
    /// `None` when the best threshold rejects everything.
    pub threshold: Option<Real>,
}

fn hter_of(c: (u64, u64, u64, u64)) -> Real {
    (c.0 as Real / c.2 as Real + c.1 as Real / c.3 as Real) / 2.0 * 100.0
}

/// Threshold minimizing `|FAR − FRR|` (or the HTER itself with
/// `min_hter`), ties to the lower threshold.
pub fn hter(scores: &[Real], labels: &[u8], min_hter: bool) -> BruteHter {
    let mut best: Option<(i128, Option<Real>, Real)> = None;
    for tau in candidates(scores) {
        let c = counts(scores, labels, tau);
        let (fa, fr) = ((c.0 * c.3) as i128, (c.1 * c.2) as i128);
        let key = if min_hter { fa + fr } else { (fa - fr).abs() };
        if best.is_none_or(|b| key < b.0) {
            best = Some((key, tau, hter_of(c)));
        }
    }
    let (_, threshold, hter) = best.unwrap();
    BruteHter { hter, threshold }
}

/// TPR (percent) at the lowest threshold with FAR ≤ target.
pub fn tpr_at_fpr(scores: &[Real], labels: &[u8], target: Real) -> (Real, Option<Real>) {
    for tau in candidates(scores) {
        let c = counts(scores, labels, tau);
        if c.0 as Real / c.2 as Real <= target {
            return (100.0 * (1.0 - c.1 as Real / c.3 as Real), tau);
        }
    }
    unreachable!("the reject-all threshold has FAR 0")
}

/// A random score set with both classes present. Scores sit on a grid so
/// that ties occur; `coarse` makes them frequent.
pub fn random_set(rng: &mut ChaCha8Rng, max_len: usize) -> ScoreSet {
    let n = rng.random_range(2..=max_len);
    let levels = if rng.random_bool(0.3) { rng.random_range(2..20) } else { 4096 };
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    let shift = rng.random_range(0..=levels / 3);
    let scores = labels
        .iter()
        .map(|&l| (rng.random_range(0..levels) + shift * l as usize).min(levels) as Real / levels as Real)
        .collect();
    ScoreSet::ungrouped(scores, labels).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random strictly increasing map that keeps grid-spaced scores distinct.
pub fn random_monotone(rng: &mut ChaCha8Rng) -> impl Fn(Real) -> Real {
    let a: Real = rng.random_range(0.5..3.0);
    let b: Real = rng.random_range(-2.0..2.0);
    let kind = rng.random_range(0..4);
    move |x: Real| {
        let y = a * x + b;
        match kind {
            0 => y,
            1 => y * y * y + y,
            2 => y.exp(),
            _ => 1.0 / (1.0 + (-y).exp()),
        }
    }
}
