//! Per-case inference over a split, the evaluation report, and paired
//! model comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{crop_tensor, locate_oracle, locate_stomach, normalize_volume, paste_labels, COARSEST_STRIDE};
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    auc, bootstrap_ci, delong_test, localization_hit, permutation_test, roc_points, Ci, Confusion, DeLong,
    PermutationTest, RateMetric,
};
use crate::model::{infer, localizer_prefix, ModelConfig, Preset};
use crate::params::ModelParams;
use crate::phantom::IndexEntry;
use crate::volume::{LabelMap, VolumeSample, BACKGROUND, TUMOR};

pub const REPORT_VERSION: &str = "cimt-report/1";
pub const SIGNIFICANCE: f64 = 0.05;

/// One evaluated case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseScore {
    pub id: String,
    /// Probability of cancer (volume score for unet-s4c).
    pub score: f64,
    pub label: u8,
    pub predicted: bool,
    pub tumor_voxels: usize,
    pub gt_tumor_voxels: usize,
    pub dice: f64,
    pub localization_hit: bool,
    /// The localizer found no stomach and the full volume was used.
    pub roi_fallback: bool,
}

/// Detection within one tumor-size quartile of the positive cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stratum {
    pub quartile: usize,
    pub min_voxels: usize,
    pub max_voxels: usize,
    pub n: usize,
    pub detected: usize,
    pub localized: usize,
    pub detection_rate: f64,
    pub localization_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: String,
    pub preset: Preset,
    pub config_hash: String,
    pub split: String,
    pub oracle_roi: bool,
    pub all_negative_cohort: bool,
    pub n: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub threshold: f64,
    /// `None` when undefined (single-class cohort).
    pub auc: Option<Ci>,
    pub sensitivity: Option<Ci>,
    pub specificity: Option<Ci>,
    /// Fraction of positive cases whose tumor was localized.
    pub localization_rate: Option<f64>,
    pub strata: Vec<Stratum>,
    pub roi_fallbacks: usize,
    pub bootstrap_redraws: usize,
    pub cases: Vec<CaseScore>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub oracle_roi: bool,
    pub all_negative_cohort: bool,
    pub jobs: usize,
}

/// Localize, crop, run the model and paste the mask back into the full volume.
pub fn evaluate_case(
    params: &ModelParams,
    preset: Preset,
    model: &ModelConfig,
    id: &str,
    sample: &VolumeSample,
    threshold: f64,
    oracle_roi: bool,
) -> Result<CaseScore> {
    let ctx = |e: Error| match e {
        Error::Shape(m) => Error::Shape(format!("case {id}: {m}")),
        Error::Data(m) => Error::Data(format!("case {id}: {m}")),
        Error::Contract(m) => Error::Contract(format!("case {id}: {m}")),
        other => other,
    };
    let extents = sample.extents();
    let x = normalize_volume(&sample.image);
    let located = if oracle_roi {
        locate_oracle(&sample.labels, model.roi_margin)
    } else {
        locate_stomach(&x, params, localizer_prefix(params), model.roi_margin).map_err(ctx)?
    };
    let roi = located.roi.aligned(COARSEST_STRIDE, extents);
    let crop = crop_tensor(&x, &roi).map_err(ctx)?;
    let out = infer(params, preset, model, &crop).map_err(ctx)?;
    let full = paste_labels(&LabelMap::filled(extents, BACKGROUND), &out.labels, &roi).map_err(ctx)?;
    let pred = full.mask(TUMOR);
    let gt = sample.labels.mask(TUMOR);
    let loc = localization_hit(&pred, &gt, sample.patient_label).map_err(ctx)?;
    if !out.score.is_finite() {
        return Err(Error::NonFinite(format!("case {id}: score")));
    }
    Ok(CaseScore {
        id: id.to_string(),
        score: out.score,
        label: sample.patient_label,
        predicted: out.score > threshold,
        tumor_voxels: out.tumor_voxels,
        gt_tumor_voxels: sample.labels.count(TUMOR),
        dice: loc.dice,
        localization_hit: loc.hit,
        roi_fallback: located.fallback,
    })
}

/// Evaluates `cases` on up to `jobs` threads; output order follows input order.
pub fn evaluate_cases(
    params: &ModelParams,
    preset: Preset,
    model: &ModelConfig,
    cases: &[(&IndexEntry, &VolumeSample)],
    threshold: f64,
    opts: &EvalOptions,
) -> Result<Vec<CaseScore>> {
    let jobs = opts.jobs.clamp(1, cases.len().max(1));
    let chunk = cases.len().div_ceil(jobs).max(1);
    let run = |part: &[(&IndexEntry, &VolumeSample)]| {
        part.iter()
            .map(|(e, s)| evaluate_case(params, preset, model, &e.id, s, threshold, opts.oracle_roi))
            .collect::<Result<Vec<_>>>()
    };
    if jobs == 1 {
        return run(cases);
    }
    let parts: Vec<Result<Vec<CaseScore>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases.chunks(chunk).map(|part| scope.spawn(move || run(part))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(cases.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Positive cases split into four rank groups by ground-truth tumor volume.
pub fn size_strata(cases: &[CaseScore]) -> Vec<Stratum> {
    let mut pos: Vec<&CaseScore> = cases.iter().filter(|c| c.label == 1).collect();
    if pos.is_empty() {
        return Vec::new();
    }
    pos.sort_by(|a, b| a.gt_tumor_voxels.cmp(&b.gt_tumor_voxels).then_with(|| a.id.cmp(&b.id)));
    let n = pos.len();
    (0..4)
        .filter_map(|q| {
            let group = &pos[q * n / 4..(q + 1) * n / 4];
            if group.is_empty() {
                return None;
            }
            let detected = group.iter().filter(|c| c.predicted).count();
            let localized = group.iter().filter(|c| c.localization_hit).count();
            Some(Stratum {
                quartile: q + 1,
                min_voxels: group[0].gt_tumor_voxels,
                max_voxels: group[group.len() - 1].gt_tumor_voxels,
                n: group.len(),
                detected,
                localized,
                detection_rate: rate(detected, group.len()),
                localization_rate: rate(localized, group.len()),
            })
        })
        .collect()
}

/// Aggregates case scores into a report with bootstrap intervals.
pub fn summarize(
    cases: Vec<CaseScore>,
    preset: Preset,
    config_hash: &str,
    split: &str,
    threshold: f64,
    opts: &EvalOptions,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data(format!("split `{split}` has no cases to evaluate")));
    }
    let scores: Vec<f64> = cases.iter().map(|c| c.score).collect();
    let labels: Vec<u8> = cases.iter().map(|c| c.label).collect();
    let n_positive = labels.iter().filter(|&&l| l == 1).count();
    let n_negative = cases.len() - n_positive;
    let boot = cfg.bootstrap();
    let mut redraws = 0;

    let auc_ci = if n_positive > 0 && n_negative > 0 {
        let (ci, r) = bootstrap_ci(
            cases.len(),
            |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                auc(&s, &l).ok()
            },
            &boot,
        )?;
        redraws += r;
        Some(ci)
    } else {
        None
    };
    let mut rate_ci = |class: u8, n_class: usize| -> Result<Option<Ci>> {
        if n_class == 0 {
            return Ok(None);
        }
        let (ci, r) = bootstrap_ci(
            cases.len(),
            |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                let c = Confusion::at(&s, &l, threshold);
                if class == 1 {
                    c.sensitivity()
                } else {
                    c.specificity()
                }
            },
            &boot,
        )?;
        redraws += r;
        Ok(Some(ci))
    };
    let sensitivity = rate_ci(1, n_positive)?;
    let specificity = rate_ci(0, n_negative)?;

    let localized = cases.iter().filter(|c| c.label == 1 && c.localization_hit).count();
    Ok(EvalReport {
        version: REPORT_VERSION.to_string(),
        preset,
        config_hash: config_hash.to_string(),
        split: split.to_string(),
        oracle_roi: opts.oracle_roi,
        all_negative_cohort: opts.all_negative_cohort,
        n: cases.len(),
        n_positive,
        n_negative,
        threshold,
        auc: auc_ci,
        sensitivity,
        specificity,
        localization_rate: (n_positive > 0).then(|| rate(localized, n_positive)),
        strata: size_strata(&cases),
        roi_fallbacks: cases.iter().filter(|c| c.roi_fallback).count(),
        bootstrap_redraws: redraws,
        cases,
    })
}

/// Runs inference on `cases` and builds the report. In all-negative-cohort
/// mode only the normal cases are kept.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    params: &ModelParams,
    preset: Preset,
    model: &ModelConfig,
    config_hash: &str,
    split: &str,
    cases: &[(&IndexEntry, &VolumeSample)],
    threshold: f64,
    opts: &EvalOptions,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let kept: Vec<(&IndexEntry, &VolumeSample)> = cases
        .iter()
        .filter(|(_, s)| !opts.all_negative_cohort || s.patient_label == 0)
        .copied()
        .collect();
    let scores = evaluate_cases(params, preset, model, &kept, threshold, opts)?;
    summarize(scores, preset, config_hash, split, threshold, opts, cfg)
}

/// ROC curve as `fpr,tpr,threshold` CSV; empty body for a single-class cohort.
pub fn roc_csv(report: &EvalReport) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    let scores: Vec<f64> = report.cases.iter().map(|c| c.score).collect();
    let labels: Vec<u8> = report.cases.iter().map(|c| c.label).collect();
    if let Ok(points) = roc_points(&scores, &labels) {
        for p in points {
            let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
    }
    out
}

/// One row of a model comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub diff: Option<f64>,
    pub test: String,
    pub p: f64,
    /// `†` for a significant DeLong test, `*` for a significant permutation test.
    pub marker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n: usize,
    pub delong: Option<DeLong>,
    pub sensitivity: PermutationTest,
    pub specificity: PermutationTest,
    pub rows: Vec<ComparisonRow>,
}

/// Pairs the cases of two reports by id. Both must cover the same ids with
/// the same labels.
pub fn pair_cases<'r>(a: &'r EvalReport, b: &'r EvalReport) -> Result<Vec<(&'r CaseScore, &'r CaseScore)>> {
    let index: std::collections::BTreeMap<&str, &CaseScore> = b.cases.iter().map(|c| (c.id.as_str(), c)).collect();
    if index.len() != b.cases.len() || a.cases.len() != b.cases.len() {
        return Err(Error::Unpaired(format!(
            "reports hold {} and {} cases",
            a.cases.len(),
            b.cases.len()
        )));
    }
    a.cases
        .iter()
        .map(|ca| {
            let cb = index
                .get(ca.id.as_str())
                .ok_or_else(|| Error::Unpaired(format!("case {} is missing from the second report", ca.id)))?;
            if ca.label != cb.label {
                return Err(Error::Unpaired(format!("case {} has different labels", ca.id)));
            }
            Ok((ca, *cb))
        })
        .collect()
}

fn marker(p: f64, symbol: &str) -> String {
    if p < SIGNIFICANCE {
        symbol.to_string()
    } else {
        String::new()
    }
}

/// DeLong test on AUC and permutation tests on sensitivity and specificity
/// at each report's own operating threshold.
pub fn compare_reports(a: &EvalReport, b: &EvalReport, replicates: usize, seed: u64) -> Result<Comparison> {
    let pairs = pair_cases(a, b)?;
    let labels: Vec<u8> = pairs.iter().map(|(x, _)| x.label).collect();
    let sa: Vec<f64> = pairs.iter().map(|(x, _)| x.score).collect();
    let sb: Vec<f64> = pairs.iter().map(|(_, y)| y.score).collect();
    let pa: Vec<bool> = pairs.iter().map(|(x, _)| x.predicted).collect();
    let pb: Vec<bool> = pairs.iter().map(|(_, y)| y.predicted).collect();

    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let delong = if n_pos >= 2 && labels.len() - n_pos >= 2 {
        Some(delong_test(&sa, &sb, &labels)?)
    } else {
        None
    };
    let sensitivity = permutation_test(&pa, &pb, &labels, RateMetric::Sensitivity, replicates, seed)?;
    let specificity = permutation_test(&pa, &pb, &labels, RateMetric::Specificity, replicates, seed)?;

    let rates = |p: &[bool]| {
        let s: Vec<f64> = p.iter().map(|&b| f64::from(u8::from(b))).collect();
        let c = Confusion::at(&s, &labels, 0.5);
        (c.sensitivity(), c.specificity())
    };
    let (sens_a, spec_a) = rates(&pa);
    let (sens_b, spec_b) = rates(&pb);
    let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
    let mut rows = Vec::new();
    if let Some(d) = &delong {
        rows.push(ComparisonRow {
            metric: "auc".into(),
            a: Some(d.auc_a),
            b: Some(d.auc_b),
            diff: Some(d.auc_a - d.auc_b),
            test: "delong".into(),
            p: d.p,
            marker: marker(d.p, "†"),
        });
    }
    for (name, x, y, t) in [
        ("sensitivity", sens_a, sens_b, &sensitivity),
        ("specificity", spec_a, spec_b, &specificity),
    ] {
        rows.push(ComparisonRow {
            metric: name.into(),
            a: x,
            b: y,
            diff: diff(x, y),
            test: "permutation".into(),
            p: t.p,
            marker: marker(t.p, "*"),
        });
    }
    Ok(Comparison {
        n: pairs.len(),
        delong,
        sensitivity,
        specificity,
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// Significance table, either aligned text or CSV.
pub fn comparison_table(c: &Comparison, csv: bool) -> String {
    let mut out = String::new();
    if csv {
        out.push_str("metric,a,b,diff,test,p,marker\n");
        for r in &c.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.metric,
                cell(r.a),
                cell(r.b),
                cell(r.diff),
                r.test,
                r.p,
                r.marker
            );
        }
    } else {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10} {:>12} {:>8}",
            "metric", "a", "b", "diff", "test", "p"
        );
        for r in &c.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>10} {:>10} {:>10} {:>12} {:>8.4}{}",
                r.metric,
                cell(r.a),
                cell(r.b),
                cell(r.diff),
                r.test,
                r.p,
                r.marker
            );
        }
        let _ = writeln!(out, "n = {} paired cases; †: DeLong p < 0.05; *: permutation p < 0.05", c.n);
    }
    out
}
