//! Ensemble loss estimation from cached per-token probabilities.
//!
//! For a mixture λ the ensemble's probability of token j is Σᵢ λᵢ p_i^(j),
//! mixed first and logged once, and the domain loss is the mean negative
//! log over tokens. Token summation is sequential in ascending token order
//! so results are bit-stable regardless of thread count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ProbCache;

const SIMPLEX_TOL: f64 = 1e-12;

/// Tolerance under which a mixture counts as sitting on a simplex corner.
pub const CORNER_TOL: f64 = 1e-9;

/// A point on the k-simplex: non-negative weights summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("mixture has no components".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidWeights(
                "mixture weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidWeights(format!(
                "mixture weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// Scale a non-negative vector onto the simplex.
    pub fn renormalized(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("mixture has no components".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidWeights(
                "mixture weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidWeights("mixture weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1);
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        assert!(i < k);
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Index of the dominant component if its weight is within CORNER_TOL
    /// of 1, i.e. the mixture is (numerically) a one-hot expert mixture.
    pub fn corner_index(&self) -> Option<usize> {
        self.0
            .iter()
            .position(|&w| w >= 1.0 - CORNER_TOL)
    }

    pub fn is_corner(&self) -> bool {
        self.corner_index().is_some()
    }
}

impl std::ops::Index<usize> for MixtureWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Mean negative log-probability (nats per token) keyed by domain id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossVector {
    pub per_domain: BTreeMap<String, f64>,
}

impl LossVector {
    pub fn new(per_domain: BTreeMap<String, f64>) -> Result<Self> {
        let v = Self { per_domain };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (d, &l) in &self.per_domain {
            if !l.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "loss for domain {d} is not finite"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, domain: &str) -> Result<f64> {
        self.per_domain
            .get(domain)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn insert(&mut self, domain: impl Into<String>, loss: f64) {
        self.per_domain.insert(domain.into(), loss);
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.per_domain.keys().map(String::as_str)
    }
}

/// Reduces a per-domain loss vector to the scalar the optimizer minimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Aggregator {
    /// Arithmetic mean over one group of domains.
    AvgGroup { group: Vec<String> },
    /// mean(group1) + mean(group2), the "sum of the two averages" form.
    SumOfGroupAverages {
        group1: Vec<String>,
        group2: Vec<String>,
    },
    /// Σ wⱼ·Lⱼ over explicitly weighted domains.
    Weighted { weights: BTreeMap<String, f64> },
}

impl Aggregator {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::AvgGroup { group } => {
                if group.is_empty() {
                    return Err(Error::config("aggregator.group", "group is empty"));
                }
            }
            Self::SumOfGroupAverages { group1, group2 } => {
                if group1.is_empty() || group2.is_empty() {
                    return Err(Error::config("aggregator", "both groups must be non-empty"));
                }
            }
            Self::Weighted { weights } => {
                if weights.is_empty() {
                    return Err(Error::config("aggregator.weights", "no weights given"));
                }
                if weights.values().any(|w| !w.is_finite()) {
                    return Err(Error::config("aggregator.weights", "weights must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Every domain id the aggregator reads.
    pub fn referenced_domains(&self) -> Vec<&str> {
        match self {
            Self::AvgGroup { group } => group.iter().map(String::as_str).collect(),
            Self::SumOfGroupAverages { group1, group2 } => {
                group1.iter().chain(group2).map(String::as_str).collect()
            }
            Self::Weighted { weights } => weights.keys().map(String::as_str).collect(),
        }
    }
}

fn group_mean(losses: &LossVector, group: &[String]) -> Result<f64> {
    let mut sum = 0.0;
    for d in group {
        sum += losses.get(d)?;
    }
    Ok(sum / group.len() as f64)
}

/// Collapse per-domain losses into the aggregator's scalar score.
pub fn aggregate(losses: &LossVector, g: &Aggregator) -> Result<f64> {
    g.validate()?;
    match g {
        Aggregator::AvgGroup { group } => group_mean(losses, group),
        Aggregator::SumOfGroupAverages { group1, group2 } => {
            Ok(group_mean(losses, group1)? + group_mean(losses, group2)?)
        }
        Aggregator::Weighted { weights } => {
            let mut sum = 0.0;
            for (d, w) in weights {
                sum += w * losses.get(d)?;
            }
            Ok(sum)
        }
    }
}

/// Ensemble cross-entropy on one validation domain: mix each token's
/// per-expert probabilities by λ, take one log, average over tokens.
pub fn mde_domain_loss(cache: &ProbCache, lambda: &MixtureWeights) -> Result<f64> {
    if cache.num_experts() != lambda.len() {
        return Err(Error::DimensionMismatch(format!(
            "cache {} has {} experts, mixture has {} components",
            cache.domain_id,
            cache.num_experts(),
            lambda.len()
        )));
    }
    if cache.num_tokens() == 0 {
        return Err(Error::CorruptCache(format!(
            "cache {} has no tokens",
            cache.domain_id
        )));
    }
    let weights = lambda.as_slice();
    let mut log_sum = 0.0;
    for (j, row) in cache.probs.iter().enumerate() {
        let mut mixed = 0.0;
        for (i, &p) in row.iter().enumerate() {
            mixed += weights[i] * p;
        }
        if !(mixed > 0.0) {
            return Err(Error::CorruptCache(format!(
                "cache {}: mixed probability {mixed} at token {j}",
                cache.domain_id
            )));
        }
        log_sum += mixed.ln();
    }
    Ok(-(log_sum / cache.num_tokens() as f64))
}

/// Caches for all validation domains, in a fixed domain order, sharing one
/// expert list. Feature vectors and loss vectors follow this order.
#[derive(Debug, Clone)]
pub struct CacheSet {
    caches: Vec<ProbCache>,
}

impl CacheSet {
    pub fn new(caches: Vec<ProbCache>) -> Result<Self> {
        if caches.is_empty() {
            return Err(Error::InconsistentExperts("no caches given".into()));
        }
        let experts = &caches[0].expert_ids;
        for c in &caches {
            if &c.expert_ids != experts {
                return Err(Error::InconsistentExperts(format!(
                    "cache {} lists experts {:?}, cache {} lists {:?}",
                    c.domain_id, c.expert_ids, caches[0].domain_id, experts
                )));
            }
            c.validate()?;
        }
        let mut ids: Vec<&str> = caches.iter().map(|c| c.domain_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InconsistentExperts("duplicate cache domain ids".into()));
        }
        Ok(Self { caches })
    }

    pub fn caches(&self) -> &[ProbCache] {
        &self.caches
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.caches.iter().map(|c| c.domain_id.as_str()).collect()
    }

    pub fn get(&self, domain_id: &str) -> Option<&ProbCache> {
        self.caches.iter().find(|c| c.domain_id == domain_id)
    }

    pub fn expert_ids(&self) -> &[String] {
        &self.caches[0].expert_ids
    }

    pub fn num_experts(&self) -> usize {
        self.caches[0].num_experts()
    }

    pub fn num_domains(&self) -> usize {
        self.caches.len()
    }
}

/// Ensemble loss per validation domain, in the cache set's domain order.
pub fn mde_features(caches: &CacheSet, lambda: &MixtureWeights) -> Result<Vec<f64>> {
    caches
        .caches
        .iter()
        .map(|c| mde_domain_loss(c, lambda))
        .collect()
}

/// Same losses keyed by domain id, for aggregators.
pub fn mde_loss_vector(caches: &CacheSet, lambda: &MixtureWeights) -> Result<LossVector> {
    let mut out = LossVector::default();
    for c in &caches.caches {
        out.insert(c.domain_id.clone(), mde_domain_loss(c, lambda)?);
    }
    Ok(out)
}

/// Per-dataset average token probability of each expert, rows following the
/// cache set's domain order. Input to the interpolation ranking score.
pub fn mean_probs(caches: &CacheSet) -> Vec<Vec<f64>> {
    caches
        .caches
        .iter()
        .map(|c| {
            let n = c.num_tokens() as f64;
            (0..c.num_experts())
                .map(|i| c.probs.iter().map(|row| row[i]).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Ranking score that mixes per-dataset average probabilities first and
/// logs once: score_j = −ln(Σᵢ λᵢ · mean_probs[j][i]). Monotone in the
/// mixed mean, so it orders mixtures; it is not a calibrated loss.
pub fn per_domain_interpolation_loss(
    mean_probs: &[Vec<f64>],
    lambda: &MixtureWeights,
) -> Result<Vec<f64>> {
    mean_probs
        .iter()
        .enumerate()
        .map(|(j, row)| {
            if row.len() != lambda.len() {
                return Err(Error::DimensionMismatch(format!(
                    "mean-probability row {j} has {} entries, mixture has {}",
                    row.len(),
                    lambda.len()
                )));
            }
            let mut mixed = 0.0;
            for (i, &p) in row.iter().enumerate() {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::InvalidDistribution(format!(
                        "mean probability {p} for domain row {j}, expert {i} must be positive"
                    )));
                }
                mixed += lambda[i] * p;
            }
            Ok(-mixed.ln())
        })
        .collect()
}
