//! Evaluation protocol: squared error, rank correlation, and pairwise
//! ranking accuracy over repeated seeded train/test splits.
//!
//! Corner mixtures always land in the training side and count toward the
//! train-size budget. Splits are drawn from records in mixture-id order,
//! so metrics do not depend on how the measurement file was assembled.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mde::{aggregate, Aggregator, CacheSet};
use crate::proxy::MeasurementSet;
use crate::regression::{fit_predictor, Family, FeatureSpec, FitOptions};
use crate::rng::stream_rng;

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} true values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("mse needs at least one value".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Average ranks (1-based); tied values share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant input has no rank ordering".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} true values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientData(
            "rank correlation needs at least two values".into(),
        ));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// Fraction of unordered pairs with distinct true values the predictions
/// order the same way; prediction ties count one half.
pub fn pairwise_ranking_accuracy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} true values",
            pred.len(),
            truth.len()
        )));
    }
    let mut pairs = 0usize;
    let mut score = 0.0;
    for a in 0..truth.len() {
        for b in (a + 1)..truth.len() {
            if truth[a] == truth[b] {
                continue;
            }
            pairs += 1;
            let pd = pred[a] - pred[b];
            if pd == 0.0 {
                score += 0.5;
            } else if (pd > 0.0) == (truth[a] > truth[b]) {
                score += 1.0;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedCorrelation(
            "no pairs with distinct true values".into(),
        ));
    }
    Ok(score / pairs as f64)
}

/// Pairwise accuracy where a pair counts only when ordered consistently
/// under every aggregate at once; any tie caps the pair at one half.
pub fn joint_pairwise_accuracy(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::DimensionMismatch(
            "need matching, non-empty prediction and truth lists".into(),
        ));
    }
    let n = truths[0].len();
    if preds.iter().chain(truths).any(|v| v.len() != n) {
        return Err(Error::DimensionMismatch(
            "all aggregates must score the same mixtures".into(),
        ));
    }
    let mut pairs = 0usize;
    let mut score = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            if truths.iter().any(|t| t[a] == t[b]) {
                continue;
            }
            pairs += 1;
            let mut pair_score = 1.0f64;
            for (p, t) in preds.iter().zip(truths) {
                let pd = p[a] - p[b];
                let s = if pd == 0.0 {
                    0.5
                } else if (pd > 0.0) == (t[a] > t[b]) {
                    1.0
                } else {
                    0.0
                };
                pair_score = pair_score.min(s);
            }
            score += pair_score;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedCorrelation(
            "no pairs with distinct true values under every aggregate".into(),
        ));
    }
    Ok(score / pairs as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub n_repeats: usize,
    pub train_size: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(train_size: usize, seed: u64) -> Self {
        Self {
            n_repeats: 5,
            train_size,
            seed,
        }
    }

    pub fn validate(&self, total_records: usize) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::config("eval.n_repeats", "must be at least 1"));
        }
        if self.train_size == 0 {
            return Err(Error::config("eval.train_size", "must be at least 1"));
        }
        if self.train_size >= total_records {
            return Err(Error::config(
                "eval.train_size",
                format!(
                    "must leave held-out records: train_size {} with {total_records} records",
                    self.train_size
                ),
            ));
        }
        Ok(())
    }
}

/// Indices into the mixture-id-sorted record list. Corners go to train.
fn split_indices(
    set: &MeasurementSet,
    train_size: usize,
    seed: u64,
    repeat: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..set.records.len()).collect();
    order.sort_by_key(|&i| set.records[i].mixture_id);

    let (corners, mut pool): (Vec<usize>, Vec<usize>) = order
        .into_iter()
        .partition(|&i| set.records[i].lambda.is_corner());
    if train_size < corners.len() {
        return Err(Error::config(
            "eval.train_size",
            format!(
                "train_size {train_size} cannot hold the {} corner mixtures",
                corners.len()
            ),
        ));
    }

    let mut rng = stream_rng(seed, "eval-split", repeat as u64);
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let n_random = train_size - corners.len();
    if n_random > pool.len() {
        return Err(Error::InsufficientData(format!(
            "train_size {train_size} exceeds the available records"
        )));
    }
    let mut train = corners;
    train.extend(&pool[..n_random]);
    let test: Vec<usize> = pool[n_random..].to_vec();
    if test.is_empty() {
        return Err(Error::InsufficientData(
            "split leaves no held-out records".into(),
        ));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricValues {
    pub mse: f64,
    /// None when the correlation is undefined (constant predictions).
    pub spearman: Option<f64>,
    pub pairwise_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatMetrics {
    pub aggregates: BTreeMap<String, MetricValues>,
    pub per_domain: BTreeMap<String, MetricValues>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub defined_repeats: usize,
}

impl MetricSummary {
    fn from_values(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        if defined.is_empty() {
            return Self {
                mean: None,
                ci_half_width: None,
                defined_repeats: 0,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let sd = if defined.len() == 1 {
            0.0
        } else {
            (defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean: Some(mean),
            ci_half_width: Some(1.96 * sd / n.sqrt()),
            defined_repeats: defined.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBlock {
    pub mse: MetricSummary,
    pub spearman: MetricSummary,
    pub pairwise_accuracy: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: String,
    pub feature_mode: String,
    pub train_size: usize,
    pub n_repeats: usize,
    /// 95% interval: normal approximation, 1.96·sd/√n.
    pub ci_method: String,
    pub aggregates: BTreeMap<String, MetricBlock>,
    pub per_domain: BTreeMap<String, MetricBlock>,
    pub per_repeat: Vec<RepeatMetrics>,
}

fn metric_values(pred: &[f64], truth: &[f64]) -> Result<MetricValues> {
    let rho = match spearman(pred, truth) {
        Ok(v) => Some(v),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let acc = match pairwise_ranking_accuracy(pred, truth) {
        Ok(v) => Some(v),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricValues {
        mse: mse(pred, truth)?,
        spearman: rho,
        pairwise_accuracy: acc,
    })
}

/// Fit every requested family on seeded train/test splits and score the
/// held-out mixtures per aggregate and per domain.
pub fn run_splits(
    data: &MeasurementSet,
    families: &[(Family, FeatureSpec)],
    plan: &SplitPlan,
    caches: Option<&CacheSet>,
    aggregators: &[(String, Aggregator)],
    opts: &FitOptions,
) -> Result<Vec<EvalReport>> {
    data.validate()?;
    plan.validate(data.records.len())?;
    let domain_ids = data.domain_ids();
    for (_, agg) in aggregators {
        agg.validate()?;
        for d in agg.referenced_domains() {
            if !domain_ids.iter().any(|x| x == d) {
                return Err(Error::UnknownDomain(format!(
                    "aggregator references {d}, which the measurements do not cover"
                )));
            }
        }
    }

    // repeat-major: one split and one training set shared by all families
    let per_repeat: Vec<Vec<RepeatMetrics>> = (0..plan.n_repeats)
        .into_par_iter()
        .map(|repeat| -> Result<Vec<RepeatMetrics>> {
            let (train_idx, test_idx) = split_indices(data, plan.train_size, plan.seed, repeat)?;
            let train = MeasurementSet {
                records: train_idx.iter().map(|&i| data.records[i].clone()).collect(),
                provenance: data.provenance.clone(),
            };
            let mut out = Vec::with_capacity(families.len());
            for (family, spec) in families {
                let predictor = fit_predictor(*family, &train, spec, caches, opts)?;
                let mut predicted = Vec::with_capacity(test_idx.len());
                for &i in &test_idx {
                    predicted.push(predictor.predict(&data.records[i].lambda, caches)?);
                }

                let mut aggregates = BTreeMap::new();
                for (name, agg) in aggregators {
                    let pred: Vec<f64> = predicted
                        .iter()
                        .map(|lv| aggregate(lv, agg))
                        .collect::<Result<_>>()?;
                    let truth: Vec<f64> = test_idx
                        .iter()
                        .map(|&i| aggregate(&data.records[i].losses, agg))
                        .collect::<Result<_>>()?;
                    aggregates.insert(name.clone(), metric_values(&pred, &truth)?);
                }

                let mut per_domain = BTreeMap::new();
                for d in &domain_ids {
                    let pred: Vec<f64> = predicted
                        .iter()
                        .map(|lv| lv.get(d))
                        .collect::<Result<_>>()?;
                    let truth: Vec<f64> = test_idx
                        .iter()
                        .map(|&i| data.records[i].losses.get(d))
                        .collect::<Result<_>>()?;
                    per_domain.insert(d.clone(), metric_values(&pred, &truth)?);
                }
                out.push(RepeatMetrics {
                    aggregates,
                    per_domain,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(families.len());
    for (f_idx, (family, spec)) in families.iter().enumerate() {
        let repeats: Vec<RepeatMetrics> = per_repeat.iter().map(|r| r[f_idx].clone()).collect();
        let mut agg_blocks = BTreeMap::new();
        for (name, _) in aggregators {
            agg_blocks.insert(name.clone(), summarize(&repeats, |m| &m.aggregates[name]));
        }
        let mut dom_blocks = BTreeMap::new();
        for d in &domain_ids {
            dom_blocks.insert(d.clone(), summarize(&repeats, |m| &m.per_domain[d]));
        }
        reports.push(EvalReport {
            family: family.name().to_string(),
            feature_mode: spec.mode_name().to_string(),
            train_size: plan.train_size,
            n_repeats: plan.n_repeats,
            ci_method: "normal approximation, 1.96*sd/sqrt(n)".to_string(),
            aggregates: agg_blocks,
            per_domain: dom_blocks,
            per_repeat: repeats,
        });
    }
    Ok(reports)
}

fn summarize(repeats: &[RepeatMetrics], pick: impl Fn(&RepeatMetrics) -> &MetricValues) -> MetricBlock {
    let mse: Vec<Option<f64>> = repeats.iter().map(|m| Some(pick(m).mse)).collect();
    let rho: Vec<Option<f64>> = repeats.iter().map(|m| pick(m).spearman).collect();
    let acc: Vec<Option<f64>> = repeats.iter().map(|m| pick(m).pairwise_accuracy).collect();
    MetricBlock {
        mse: MetricSummary::from_values(&mse),
        spearman: MetricSummary::from_values(&rho),
        pairwise_accuracy: MetricSummary::from_values(&acc),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    pub train_size: usize,
    pub mean_spearman: Option<f64>,
    pub ci_half_width: Option<f64>,
}

/// Ranking quality of one family as the training budget grows; corner rows
/// count toward each budget.
pub fn learning_curve(
    data: &MeasurementSet,
    family: Family,
    spec: &FeatureSpec,
    train_sizes: &[usize],
    plan: &SplitPlan,
    caches: Option<&CacheSet>,
    aggregator: &(String, Aggregator),
    opts: &FitOptions,
) -> Result<Vec<LearningCurvePoint>> {
    let mut points = Vec::with_capacity(train_sizes.len());
    for &size in train_sizes {
        let sized = SplitPlan {
            train_size: size,
            ..plan.clone()
        };
        let reports = run_splits(
            data,
            &[(family, spec.clone())],
            &sized,
            caches,
            std::slice::from_ref(aggregator),
            opts,
        )?;
        let block = &reports[0].aggregates[&aggregator.0];
        points.push(LearningCurvePoint {
            train_size: size,
            mean_spearman: block.spearman.mean,
            ci_half_width: block.spearman.ci_half_width,
        });
    }
    Ok(points)
}

fn cell(summary: &MetricSummary) -> String {
    match (summary.mean, summary.ci_half_width) {
        (Some(m), Some(ci)) => format!("{m:.5} ±{ci:.5}"),
        _ => "N/A".to_string(),
    }
}

/// Plain-text table: one row per family and aggregate.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut rows = vec![[
        "family".to_string(),
        "features".to_string(),
        "aggregate".to_string(),
        "mse".to_string(),
        "spearman".to_string(),
        "pairwise".to_string(),
    ]];
    for r in reports {
        for (name, block) in &r.aggregates {
            rows.push([
                r.family.clone(),
                r.feature_mode.clone(),
                name.clone(),
                cell(&block.mse),
                cell(&block.spearman),
                cell(&block.pairwise_accuracy),
            ]);
        }
    }
    let mut widths = [0usize; 6];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
