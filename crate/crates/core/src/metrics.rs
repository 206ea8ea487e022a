//! ROC statistics: AUC, sensitivity/specificity, percentile bootstrap,
//! DeLong's paired AUC test, paired permutation tests, Dice localization.

use std::cmp::Ordering;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dice above this value counts as a localized tumor.
pub const LOCALIZATION_DICE: f64 = 0.01;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Stats(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Stats(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Stats(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Twice the Mann-Whitney U statistic (concordant pairs count 2, ties 1).
fn doubled_u(scores: &[f64], labels: &[u8]) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut u2, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        u2 += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    u2
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats(format!(
            "AUC undefined with {pos} positives and {neg} negatives"
        )));
    }
    Ok(doubled_u(scores, labels) as f64 / (2 * pos * neg) as f64)
}

/// Confusion counts at a threshold; positive iff `score > threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (l == 1, s > threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
            }
        }
        c
    }

    /// `None` when there are no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let n = self.tp + self.fn_;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }

    /// `None` when there are no negatives.
    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }
}

/// Sensitivity and specificity at `threshold`; undefined rates are `None`.
pub fn sens_spec(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(Option<f64>, Option<f64>)> {
    check_inputs(scores, labels)?;
    let c = Confusion::at(scores, labels, threshold);
    Ok((c.sensitivity(), c.specificity()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC vertices from the strictest threshold down, one per distinct score.
/// The first point uses threshold `+inf` (nothing positive).
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats("ROC curve needs both classes".into()));
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let rate = |k: usize, n: usize| k as f64 / n as f64;
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    for &t in &distinct {
        // Cases with score >= t are positive at this vertex.
        let (mut tp, mut fp) = (0, 0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push(RocPoint {
            fpr: rate(fp, neg),
            tpr: rate(tp, pos),
            threshold: t,
        });
    }
    Ok(out)
}

/// Operating point chosen by maximizing `sens + spec`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl ThresholdChoice {
    pub fn youden(&self) -> f64 {
        self.sensitivity + self.specificity - 1.0
    }
}

/// Candidate thresholds: midpoints between consecutive distinct scores, and
/// `max + 1` (everything negative).
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut d = scores.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let mut out: Vec<f64> = d.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    if let Some(&m) = d.last() {
        out.push(m + 1.0);
    }
    out
}

/// Threshold maximizing `sens + spec` over [`threshold_candidates`]; the
/// lowest threshold wins ties. Both classes must be present.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<ThresholdChoice> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats(format!(
            "threshold selection needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let candidates = threshold_candidates(scores);
    // Sweep ascending: before candidate k, every score below it is negative.
    let (mut fn_, mut tn) = (0usize, 0usize);
    let mut cursor = 0;
    let mut best: Option<(u64, ThresholdChoice)> = None;
    for &t in &candidates {
        while cursor < order.len() && scores[order[cursor]] <= t {
            if labels[order[cursor]] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            cursor += 1;
        }
        let tp = pos - fn_;
        // sens + spec scaled by pos*neg, kept integral for exact comparison.
        let key = (tp * neg + tn * pos) as u64;
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            best = Some((
                key,
                ThresholdChoice {
                    threshold: t,
                    sensitivity: tp as f64 / pos as f64,
                    specificity: tn as f64 / neg as f64,
                },
            ));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Percentile confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub low: f64,
    pub point: f64,
    pub high: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicas: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Undefined replicas may be redrawn up to `max_redraw_factor * replicas` times.
    pub max_redraw_factor: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicas: 1000,
            alpha: 0.05,
            seed: 0,
            max_redraw_factor: 10,
        }
    }
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of `metric` over `n` cases resampled with
/// replacement. `metric` receives case indices and returns `None` when the
/// metric is undefined on that resample, which is then redrawn. The
/// interval always contains the point estimate.
pub fn bootstrap_ci<F>(n: usize, metric: F, cfg: &BootstrapConfig) -> Result<(Ci, usize)>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if cfg.replicas < 100 {
        return Err(Error::Stats(format!("need at least 100 replicas, got {}", cfg.replicas)));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Stats(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all).ok_or_else(|| Error::Stats("metric undefined on the full sample".into()))?;
    let mut rng = SplitMix64::named(cfg.seed, "bootstrap");
    let mut values = Vec::with_capacity(cfg.replicas);
    let mut redraws = 0;
    let mut idx = vec![0usize; n];
    while values.len() < cfg.replicas {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        match metric(&idx) {
            Some(v) => values.push(v),
            None => {
                redraws += 1;
                if redraws > cfg.max_redraw_factor * cfg.replicas {
                    return Err(Error::Stats(format!(
                        "{redraws} bootstrap replicas were undefined; use stratified resampling"
                    )));
                }
            }
        }
    }
    values.sort_by(f64::total_cmp);
    let low = quantile(&values, cfg.alpha / 2.0).min(point);
    let high = quantile(&values, 1.0 - cfg.alpha / 2.0).max(point);
    Ok((Ci { low, point, high }, redraws))
}

/// Outcome of DeLong's test for two correlated AUCs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
    /// Variance of the difference was zero.
    pub degenerate: bool,
}

fn psi(x: f64, y: f64) -> f64 {
    match x.partial_cmp(&y) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Equal) => 0.5,
        _ => 0.0,
    }
}

/// Placement values `(V10 per positive, V01 per negative)`.
pub fn placements(scores: &[f64], labels: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// Two-sided standard-normal p-value of `z`.
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// DeLong's test of `AUC(a) = AUC(b)` on paired scores.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLong> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Unpaired(format!(
            "{} vs {} scores",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let (pos, neg) = check_inputs(scores_a, labels)?;
    check_inputs(scores_b, labels)?;
    if pos < 2 || neg < 2 {
        return Err(Error::Stats(format!(
            "DeLong needs at least two cases per class ({pos} positives, {neg} negatives)"
        )));
    }
    let (a10, a01) = placements(scores_a, labels);
    let (b10, b01) = placements(scores_b, labels);
    let auc_a = a10.iter().sum::<f64>() / pos as f64;
    let auc_b = b10.iter().sum::<f64>() / pos as f64;
    let s10 = covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10);
    let s01 = covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01);
    let var = s10 / pos as f64 + s01 / neg as f64;
    let diff = auc_a - auc_b;
    if var <= 0.0 {
        let equal = diff == 0.0;
        return Ok(DeLong {
            auc_a,
            auc_b,
            z: if equal { 0.0 } else { diff.signum() * f64::INFINITY },
            p: if equal { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let z = diff / var.sqrt();
    Ok(DeLong {
        auc_a,
        auc_b,
        z,
        p: normal_two_sided(z),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateMetric {
    Sensitivity,
    Specificity,
}

impl RateMetric {
    fn class(self) -> u8 {
        match self {
            RateMetric::Sensitivity => 1,
            RateMetric::Specificity => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    /// Metric of A minus metric of B.
    pub observed: f64,
    pub p: f64,
    pub replicates: usize,
}

/// Per-case contribution to "A correct minus B correct" within the metric's class.
fn correctness_diffs(a: &[bool], b: &[bool], labels: &[u8], metric: RateMetric) -> Vec<i64> {
    let class = metric.class();
    let correct = |pred: bool| i64::from(pred == (class == 1));
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| correct(a[i]) - correct(b[i]))
        .filter(|&d| d != 0)
        .collect()
}

/// Paired permutation test of sensitivity or specificity: each replicate
/// swaps A's and B's predictions per case with probability 1/2.
/// `p = (#{|diff*| >= |diff|} + 1) / (R + 1)`.
pub fn permutation_test(
    a: &[bool],
    b: &[bool],
    labels: &[u8],
    metric: RateMetric,
    replicates: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if a.len() != b.len() || a.len() != labels.len() {
        return Err(Error::Unpaired(format!(
            "{} / {} predictions for {} labels",
            a.len(),
            b.len(),
            labels.len()
        )));
    }
    let n_class = labels.iter().filter(|&&l| l == metric.class()).count();
    let d = correctness_diffs(a, b, labels, metric);
    let observed: i64 = d.iter().sum();
    let mut rng = SplitMix64::named(seed, "permutation");
    let mut hits = 0usize;
    for _ in 0..replicates {
        let mut s = 0i64;
        let mut bits = 0u64;
        for (k, &di) in d.iter().enumerate() {
            if k % 64 == 0 {
                bits = rng.next_u64();
            }
            s += if bits >> (k % 64) & 1 == 1 { di } else { -di };
        }
        if s.abs() >= observed.abs() {
            hits += 1;
        }
    }
    Ok(PermutationTest {
        observed: if n_class == 0 { 0.0 } else { observed as f64 / n_class as f64 },
        p: (hits + 1) as f64 / (replicates + 1) as f64,
        replicates,
    })
}

/// Exact permutation p-value over all `2^m` swap patterns of the `m`
/// discordant cases (unsmoothed).
pub fn permutation_exact(a: &[bool], b: &[bool], labels: &[u8], metric: RateMetric) -> Result<f64> {
    let d = correctness_diffs(a, b, labels, metric);
    if d.len() > 24 {
        return Err(Error::Stats(format!("{} discordant cases is too many to enumerate", d.len())));
    }
    let observed: i64 = d.iter().sum::<i64>().abs();
    let total = 1u64 << d.len();
    let hits = (0..total)
        .filter(|mask| {
            let s: i64 = d
                .iter()
                .enumerate()
                .map(|(k, &di)| if mask >> k & 1 == 1 { di } else { -di })
                .sum();
            s.abs() >= observed
        })
        .count();
    Ok(hits as f64 / total as f64)
}

/// `dice > 0.01`.
pub fn is_localized(dice: f64) -> bool {
    dice > LOCALIZATION_DICE
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub dice: f64,
    pub hit: bool,
    /// Both masks were empty; Dice is taken as 1.
    pub both_empty: bool,
}

/// Dice overlap of two masks and the localization decision. Two empty masks
/// give Dice 1 and count as a hit only for a normal case.
pub fn localization_hit(pred: &[bool], gt: &[bool], patient_label: u8) -> Result<Localization> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let a = pred.iter().filter(|&&p| p).count();
    let b = gt.iter().filter(|&&g| g).count();
    if a + b == 0 {
        return Ok(Localization {
            dice: 1.0,
            hit: patient_label == 0,
            both_empty: true,
        });
    }
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let dice = (2 * inter) as f64 / (a + b) as f64;
    Ok(Localization {
        dice,
        hit: is_localized(dice),
        both_empty: false,
    })
}
