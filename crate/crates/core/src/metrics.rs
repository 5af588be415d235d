//! Score-based evaluation.
//!
//! Scores are bonafide scores: higher means more likely live. A sample is
//! accepted at threshold `τ` when its score is `>= τ`. FAR is the fraction of
//! attacks accepted and FRR the fraction of bonafide rejected. TPR@FPR reads
//! the bonafide acceptance rate at a bound on FAR.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{self, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<Real>,
    labels: Vec<u8>,
    groups: Vec<u32>,
}

impl ScoreSet {
    pub fn new(scores: Vec<Real>, labels: Vec<u8>, groups: Vec<u32>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() || scores.len() != groups.len() {
            return Err(Error::Metric(format!(
                "score set needs equal non-empty columns, got {} scores, {} labels, {} groups",
                scores.len(),
                labels.len(),
                groups.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("score {i} is not finite")));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Metric(format!("label {i} is {}, expected 0 or 1", labels[i])));
        }
        Ok(Self { scores, labels, groups })
    }

    /// Every sample in its own group.
    pub fn ungrouped(scores: Vec<Real>, labels: Vec<u8>) -> Result<Self> {
        let groups = (0..scores.len() as u32).collect();
        Self::new(scores, labels, groups)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[Real] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn groups(&self) -> &[u32] {
        &self.groups
    }

    /// Applies `f` to every score, keeping labels and groups.
    pub fn map_scores(&self, f: impl Fn(Real) -> Real) -> Result<Self> {
        Self::new(self.scores.iter().map(|&s| f(s)).collect(), self.labels.clone(), self.groups.clone())
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let bona = self.labels.iter().filter(|&&l| l == 1).count();
        let attacks = self.len() - bona;
        if bona == 0 || attacks == 0 {
            return Err(Error::Metric(format!(
                "both classes required, got {attacks} attacks and {bona} bonafide"
            )));
        }
        Ok((attacks, bona))
    }
}

/// One score per group: the mean of its members, in order of first appearance.
pub fn group_average(set: &ScoreSet) -> Result<ScoreSet> {
    let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
    let mut acc: Vec<(Real, usize, u8, u32)> = Vec::new();
    for ((&s, &l), &g) in set.scores.iter().zip(&set.labels).zip(&set.groups) {
        let i = *slot.entry(g).or_insert_with(|| {
            acc.push((0.0, 0, l, g));
            acc.len() - 1
        });
        let entry = &mut acc[i];
        if entry.2 != l {
            return Err(Error::Metric(format!("group {g} mixes labels")));
        }
        entry.0 += s;
        entry.1 += 1;
    }
    let scores = acc.iter().map(|a| a.0 / a.1 as Real).collect();
    let labels = acc.iter().map(|a| a.2).collect();
    let groups = acc.iter().map(|a| a.3).collect();
    ScoreSet::new(scores, labels, groups)
}

/// Rank-statistic AUC in percent, ties counted one half.
pub fn auc(set: &ScoreSet) -> Result<Real> {
    let (attacks, bona) = set.class_counts()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // Twice the rank sum of bonafide samples, using mid-ranks for ties, kept
    // in integers so the result is exact up to the final division.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let bona_in_tie = order[i..=j].iter().filter(|&&k| set.labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * bona_in_tie;
        i = j + 1;
    }
    let nb = bona as u128;
    let twice_u = twice_rank_sum - nb * (nb + 1);
    Ok(100.0 * twice_u as Real / (2 * attacks as u128 * nb) as Real)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ThresholdPolicy {
    /// Threshold where `|FAR − FRR|` is smallest on the evaluated set; ties
    /// go to the lower threshold.
    Eer,
    /// Threshold minimizing HTER on the evaluated set; ties to the lower one.
    MinHter,
    Fixed(Real),
    /// A threshold picked beforehand on a separate development set, see
    /// [`dev_threshold`].
    Dev(Real),
}

impl ThresholdPolicy {
    pub fn label(&self) -> String {
        match self {
            ThresholdPolicy::Eer => "eer".into(),
            ThresholdPolicy::MinHter => "min_hter".into(),
            ThresholdPolicy::Fixed(t) => format!("fixed:{t}"),
            ThresholdPolicy::Dev(_) => "dev".into(),
        }
    }
}

/// Error counts at one threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: Real,
    pub false_accepts: usize,
    pub false_rejects: usize,
    pub attacks: usize,
    pub bonafide: usize,
}

impl OperatingPoint {
    pub fn far(&self) -> Real {
        self.false_accepts as Real / self.attacks as Real
    }

    pub fn frr(&self) -> Real {
        self.false_rejects as Real / self.bonafide as Real
    }

    pub fn tpr(&self) -> Real {
        1.0 - self.frr()
    }

    pub fn hter(&self) -> Real {
        (self.far() + self.frr()) / 2.0 * 100.0
    }

    /// `|FAR − FRR|` scaled by `attacks · bonafide`, exact in integers.
    fn scaled_gap(&self) -> u128 {
        let a = self.false_accepts as i128 * self.bonafide as i128;
        let b = self.false_rejects as i128 * self.attacks as i128;
        (a - b).unsigned_abs()
    }

    fn scaled_errors(&self) -> u128 {
        (self.false_accepts * self.bonafide + self.false_rejects * self.attacks) as u128
    }
}

/// Error counts at a single threshold.
pub fn operating_point(set: &ScoreSet, threshold: Real) -> Result<OperatingPoint> {
    let (attacks, bonafide) = set.class_counts()?;
    let mut fa = 0;
    let mut fr = 0;
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (l, s >= threshold) {
            (0, true) => fa += 1,
            (1, false) => fr += 1,
            _ => {}
        }
    }
    Ok(OperatingPoint {
        threshold,
        false_accepts: fa,
        false_rejects: fr,
        attacks,
        bonafide,
    })
}

/// All distinct operating points, thresholds ascending: each distinct score,
/// then one threshold above the maximum that rejects everything.
pub fn operating_points(set: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (attacks, bonafide) = set.class_counts()?;
    let mut pairs: Vec<(Real, u8)> = set.scores.iter().copied().zip(set.labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    // Samples strictly below the current threshold.
    let mut attacks_below = 0;
    let mut bona_below = 0;
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        out.push(OperatingPoint {
            threshold: t,
            false_accepts: attacks - attacks_below,
            false_rejects: bona_below,
            attacks,
            bonafide,
        });
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 == 1 {
                bona_below += 1;
            } else {
                attacks_below += 1;
            }
            i += 1;
        }
    }
    out.push(OperatingPoint {
        threshold: pairs[pairs.len() - 1].0.next_up(),
        false_accepts: 0,
        false_rejects: bonafide,
        attacks,
        bonafide,
    });
    Ok(out)
}

/// HTER in percent plus the threshold used.
pub fn hter(set: &ScoreSet, policy: ThresholdPolicy) -> Result<(Real, Real)> {
    let point = match policy {
        ThresholdPolicy::Fixed(t) | ThresholdPolicy::Dev(t) => {
            if !t.is_finite() {
                return Err(Error::Metric(format!("threshold {t} is not finite")));
            }
            operating_point(set, t)?
        }
        ThresholdPolicy::Eer => best_point(set, OperatingPoint::scaled_gap)?,
        ThresholdPolicy::MinHter => best_point(set, OperatingPoint::scaled_errors)?,
    };
    Ok((point.hter(), point.threshold))
}

fn best_point(set: &ScoreSet, key: fn(&OperatingPoint) -> u128) -> Result<OperatingPoint> {
    let points = operating_points(set)?;
    let mut best = points[0];
    for p in &points[1..] {
        if key(p) < key(&best) {
            best = *p;
        }
    }
    Ok(best)
}

/// The EER threshold of a development set, for [`ThresholdPolicy::Dev`].
pub fn dev_threshold(dev: &ScoreSet) -> Result<Real> {
    Ok(best_point(dev, OperatingPoint::scaled_gap)?.threshold)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TprAtFpr {
    /// Percent.
    pub tpr: Real,
    pub threshold: Real,
}

/// Bonafide acceptance rate (percent) at the lowest threshold whose attack
/// acceptance rate is at most `fpr_target`. With `interpolate`, the TPR is read
/// off the piecewise-linear ROC at exactly `fpr_target` instead.
pub fn tpr_at_fpr(set: &ScoreSet, fpr_target: Real, interpolate: bool) -> Result<TprAtFpr> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::Metric(format!("fpr target {fpr_target} outside [0, 1]")));
    }
    let points = operating_points(set)?;
    // The last point has FAR 0, so a feasible one always exists; FAR falls as
    // the threshold rises, so the first feasible point has the best TPR.
    let k = points.iter().position(|p| p.far() <= fpr_target).unwrap();
    let chosen = points[k];
    let mut tpr = chosen.tpr();
    if interpolate && k > 0 && chosen.far() < fpr_target {
        // The ROC vertex just past the target: the smallest FAR above it, at
        // its best TPR (the lowest threshold reaching that FAR).
        let next_far = points[k - 1].false_accepts;
        let next = points[..k].iter().find(|p| p.false_accepts == next_far).unwrap();
        let w = (fpr_target - chosen.far()) / (next.far() - chosen.far());
        tpr += w * (next.tpr() - chosen.tpr());
    }
    Ok(TprAtFpr {
        tpr: 100.0 * tpr,
        threshold: chosen.threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub mode: String,
    pub seed: u64,
    pub target_domain: u16,
    pub hter: Real,
    pub auc: Real,
    pub tpr_at_fpr: Real,
    pub fpr_target: Real,
    pub threshold: Real,
    pub policy: String,
    pub total_bytes: u64,
}

/// Metrics of one score set. Scores are group-averaged first when
/// `average_groups` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub hter: Real,
    pub threshold: Real,
    pub auc: Real,
    pub tpr_at_fpr: Real,
}

pub fn evaluate(
    set: &ScoreSet,
    policy: ThresholdPolicy,
    fpr_target: Real,
    interpolate: bool,
    average_groups: bool,
) -> Result<Evaluation> {
    let averaged;
    let set = if average_groups {
        averaged = group_average(set)?;
        &averaged
    } else {
        set
    };
    let (h, threshold) = hter(set, policy)?;
    Ok(Evaluation {
        hter: h,
        threshold,
        auc: auc(set)?,
        tpr_at_fpr: tpr_at_fpr(set, fpr_target, interpolate)?.tpr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: Real,
    /// Sample standard deviation; 0 for a single value.
    pub std: Real,
}

pub fn mean_std(values: &[Real]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Metric("no values to aggregate".into()));
    }
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        real::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1.0))
    };
    Ok(MeanStd { mean, std })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunAggregate {
    pub runs: usize,
    pub hter: MeanStd,
    pub auc: MeanStd,
    pub tpr_at_fpr: MeanStd,
    pub threshold: MeanStd,
    pub total_bytes: MeanStd,
}

pub fn aggregate_runs(records: &[MetricsRecord]) -> Result<RunAggregate> {
    let col = |f: fn(&MetricsRecord) -> Real| mean_std(&records.iter().map(f).collect::<Vec<_>>());
    Ok(RunAggregate {
        runs: records.len(),
        hter: col(|r| r.hter)?,
        auc: col(|r| r.auc)?,
        tpr_at_fpr: col(|r| r.tpr_at_fpr)?,
        threshold: col(|r| r.threshold)?,
        total_bytes: col(|r| r.total_bytes as Real)?,
    })
}
