//! Per-domain n-gram experts and the per-token probability cache.
//!
//! An expert interpolates additive-smoothed n-gram components of orders
//! 1..=n: P(y|x) = Σ_o β_o (count_o(suffix, y) + δ) / (count_o(suffix) + δV).
//! Positions too close to the sequence start renormalize β over the orders
//! whose context fits; the first token is scored by the unigram component.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DomainCorpus, ValidationDomain};
use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-12;

/// Additive-smoothing constant and per-order interpolation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub delta: f64,
    /// One weight per order 1..=n, non-negative, summing to 1.
    pub beta: Vec<f64>,
}

impl Smoothing {
    pub fn uniform(order: usize, delta: f64) -> Self {
        Self {
            delta,
            beta: vec![1.0 / order as f64; order],
        }
    }

    pub fn default_for(order: usize) -> Self {
        Self::uniform(order, 0.5)
    }

    pub fn validate(&self, order: usize) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::config("smoothing.delta", "must be finite and > 0"));
        }
        if self.beta.len() != order {
            return Err(Error::config(
                "smoothing.beta",
                format!("expected {order} weights, got {}", self.beta.len()),
            ));
        }
        if self.beta.iter().any(|&b| !b.is_finite() || b < 0.0) {
            return Err(Error::config("smoothing.beta", "weights must be finite and >= 0"));
        }
        let sum: f64 = self.beta.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::config(
                "smoothing.beta",
                format!("weights sum to {sum}, expected 1"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    by_token: BTreeMap<u32, u64>,
}

/// Smoothed n-gram language model for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramExpert {
    pub domain_id: String,
    pub vocab_size: u32,
    pub order: usize,
    pub smoothing: Smoothing,
    /// `counts[o-1]` maps an (o-1)-token context to its transition counts.
    counts: Vec<BTreeMap<Vec<u32>, ContextCounts>>,
}

impl NgramExpert {
    /// Expert with empty count tables; every conditional is uniform 1/V.
    pub fn untrained(
        domain_id: impl Into<String>,
        vocab_size: u32,
        order: usize,
        smoothing: Smoothing,
    ) -> Result<Self> {
        assert!(order >= 1, "order must be >= 1");
        assert!(vocab_size >= 1, "vocab_size must be >= 1");
        smoothing.validate(order)?;
        Ok(Self {
            domain_id: domain_id.into(),
            vocab_size,
            order,
            smoothing,
            counts: vec![BTreeMap::new(); order],
        })
    }

    /// P(y | context), using the longest component orders that fit in
    /// `context` (its last o-1 tokens feed the order-o component).
    pub fn conditional(&self, context: &[u32], y: u32) -> f64 {
        assert!(y < self.vocab_size, "token out of range");
        let available = self.order.min(context.len() + 1);
        let weights = self.order_weights(available);
        let delta = self.smoothing.delta;
        let denom_pad = delta * self.vocab_size as f64;
        let mut p = 0.0;
        for o in 1..=available {
            if weights[o - 1] == 0.0 {
                continue;
            }
            let suffix = &context[context.len() - (o - 1)..];
            let (count_y, count_ctx) = match self.counts[o - 1].get(suffix) {
                Some(c) => (c.by_token.get(&y).copied().unwrap_or(0), c.total),
                None => (0, 0),
            };
            p += weights[o - 1] * (count_y as f64 + delta) / (count_ctx as f64 + denom_pad);
        }
        p
    }

    /// Full next-token distribution for a context.
    pub fn full_conditional(&self, context: &[u32]) -> Vec<f64> {
        (0..self.vocab_size).map(|y| self.conditional(context, y)).collect()
    }

    /// Interpolation weights restricted to the first `available` orders and
    /// renormalized. If the restriction has no mass (all those β are zero),
    /// fall back to uniform weights so short-context positions still score.
    fn order_weights(&self, available: usize) -> Vec<f64> {
        let head = &self.smoothing.beta[..available];
        let sum: f64 = head.iter().sum();
        if sum > 0.0 {
            head.iter().map(|b| b / sum).collect()
        } else {
            vec![1.0 / available as f64; available]
        }
    }
}

/// Count n-gram transitions of orders 1..=order over one domain corpus.
pub fn train_expert(corpus: &DomainCorpus, order: usize, smoothing: &Smoothing) -> Result<NgramExpert> {
    assert!(order >= 1, "order must be >= 1");
    smoothing.validate(order)?;
    if corpus.len() < order {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            order,
        });
    }
    let mut counts = vec![BTreeMap::<Vec<u32>, ContextCounts>::new(); order];
    for (o, table) in counts.iter_mut().enumerate().map(|(i, t)| (i + 1, t)) {
        for i in (o - 1)..corpus.len() {
            let ctx = corpus.tokens[i - (o - 1)..i].to_vec();
            let entry = table.entry(ctx).or_default();
            entry.total += 1;
            *entry.by_token.entry(corpus.tokens[i]).or_insert(0) += 1;
        }
    }
    Ok(NgramExpert {
        domain_id: corpus.id.clone(),
        vocab_size: corpus.vocab_size,
        order,
        smoothing: smoothing.clone(),
        counts,
    })
}

/// Probability of each realized validation token under the expert.
pub fn score_tokens(expert: &NgramExpert, domain: &ValidationDomain) -> Result<Vec<f64>> {
    for (position, &token) in domain.tokens.iter().enumerate() {
        if token >= expert.vocab_size {
            return Err(Error::VocabMismatch {
                expected: expert.vocab_size,
                got: token,
                context: format!("domain {} position {position}", domain.id),
            });
        }
    }
    let ctx_len = expert.order - 1;
    Ok(domain
        .tokens
        .iter()
        .enumerate()
        .map(|(j, &y)| expert.conditional(&domain.tokens[j.saturating_sub(ctx_len)..j], y))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ExpertFile {
    domain_id: String,
    vocab_size: u32,
    order: usize,
    smoothing: Smoothing,
    /// Per order: (context, token, count) triples sorted by context, token.
    counts: Vec<Vec<(Vec<u32>, u32, u64)>>,
}

/// Write an expert as JSON. Count triples are emitted in sorted order, so
/// the bytes depend only on the expert's contents.
pub fn save_expert(expert: &NgramExpert, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let counts = expert
        .counts
        .iter()
        .map(|table| {
            table
                .iter()
                .flat_map(|(ctx, c)| {
                    c.by_token
                        .iter()
                        .map(|(&tok, &n)| (ctx.clone(), tok, n))
                })
                .collect()
        })
        .collect();
    let file = ExpertFile {
        domain_id: expert.domain_id.clone(),
        vocab_size: expert.vocab_size,
        order: expert.order,
        smoothing: expert.smoothing.clone(),
        counts,
    };
    let text = serde_json::to_string_pretty(&file).expect("expert serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_expert(path: impl AsRef<Path>) -> Result<NgramExpert> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ExpertFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, "expert", e.to_string()))?;
    if file.order == 0 || file.counts.len() != file.order {
        return Err(Error::parse(path, "expert", "order does not match count tables"));
    }
    file.smoothing.validate(file.order)?;
    let mut counts = vec![BTreeMap::<Vec<u32>, ContextCounts>::new(); file.order];
    for (o, triples) in file.counts.into_iter().enumerate() {
        for (ctx, token, n) in triples {
            if ctx.len() != o || token >= file.vocab_size {
                return Err(Error::parse(path, "expert", "count entry out of range"));
            }
            let entry = counts[o].entry(ctx).or_default();
            entry.total += n;
            *entry.by_token.entry(token).or_insert(0) += n;
        }
    }
    Ok(NgramExpert {
        domain_id: file.domain_id,
        vocab_size: file.vocab_size,
        order: file.order,
        smoothing: file.smoothing,
        counts,
    })
}

/// Per-token next-token probabilities of every expert on one validation
/// domain. `probs[j][i]` is expert i's probability of token j.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbCache {
    pub domain_id: String,
    pub expert_ids: Vec<String>,
    pub probs: Vec<Vec<f64>>,
}

impl ProbCache {
    pub fn num_tokens(&self) -> usize {
        self.probs.len()
    }

    pub fn num_experts(&self) -> usize {
        self.expert_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.expert_ids.is_empty() {
            return Err(Error::InconsistentExperts("cache has no expert columns".into()));
        }
        let k = self.expert_ids.len();
        for (j, row) in self.probs.iter().enumerate() {
            if row.len() != k {
                return Err(Error::CorruptCache(format!(
                    "domain {}: row {j} has {} entries, expected {k}",
                    self.domain_id,
                    row.len()
                )));
            }
            for (i, &p) in row.iter().enumerate() {
                if !p.is_finite() || p <= 0.0 || p > 1.0 {
                    return Err(Error::CorruptCache(format!(
                        "domain {}: probability {p} at token {j}, expert {} outside (0,1]",
                        self.domain_id, self.expert_ids[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Score one validation domain under every expert and assemble the cache.
pub fn build_prob_cache(experts: &[NgramExpert], domain: &ValidationDomain) -> Result<ProbCache> {
    if experts.is_empty() {
        return Err(Error::InconsistentExperts("need at least one expert".into()));
    }
    let vocab = experts[0].vocab_size;
    for e in experts {
        if e.vocab_size != vocab {
            return Err(Error::InconsistentExperts(format!(
                "expert {} has vocab {}, expert {} has vocab {vocab}",
                e.domain_id, e.vocab_size, experts[0].domain_id
            )));
        }
    }
    let mut ids: Vec<&str> = experts.iter().map(|e| e.domain_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InconsistentExperts("duplicate expert domain ids".into()));
    }

    let columns: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| score_tokens(e, domain))
        .collect::<Result<_>>()?;
    let n = columns[0].len();
    let probs = (0..n)
        .map(|j| columns.iter().map(|c| c[j]).collect())
        .collect();
    let cache = ProbCache {
        domain_id: domain.id.clone(),
        expert_ids: experts.iter().map(|e| e.domain_id.clone()).collect(),
        probs,
    };
    cache.validate()?;
    Ok(cache)
}

/// Sidecar metadata written next to each cache CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub domain_id: String,
    pub num_tokens: usize,
    pub expert_ids: Vec<String>,
    pub order: usize,
    pub smoothing: Smoothing,
}

pub fn cache_manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

fn format_prob(p: f64) -> String {
    format!("{p:.11e}")
}

/// Write the cache CSV (12 significant digits per probability) and its
/// manifest. Output bytes depend only on the cache contents.
pub fn write_prob_cache(
    cache: &ProbCache,
    order: usize,
    smoothing: &Smoothing,
    csv_path: impl AsRef<Path>,
) -> Result<()> {
    let csv_path = csv_path.as_ref();
    cache.validate()?;
    let mut out = String::from("token_index");
    for id in &cache.expert_ids {
        let _ = write!(out, ",expert_{id}");
    }
    out.push('\n');
    for (j, row) in cache.probs.iter().enumerate() {
        let _ = write!(out, "{j}");
        for &p in row {
            out.push(',');
            out.push_str(&format_prob(p));
        }
        out.push('\n');
    }
    std::fs::write(csv_path, out).map_err(|e| Error::io(csv_path, e))?;

    let manifest = CacheManifest {
        domain_id: cache.domain_id.clone(),
        num_tokens: cache.num_tokens(),
        expert_ids: cache.expert_ids.clone(),
        order,
        smoothing: smoothing.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = cache_manifest_path(csv_path);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Load a cache CSV and its manifest, cross-checking the two.
pub fn load_prob_cache(csv_path: impl AsRef<Path>) -> Result<(ProbCache, CacheManifest)> {
    let csv_path = csv_path.as_ref();
    let mpath = cache_manifest_path(csv_path);
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CacheManifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::parse(&mpath, "cache manifest", e.to_string()))?;

    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptCache(format!("{}: empty file", csv_path.display())))?;
    let mut cols = header.split(',');
    if cols.next() != Some("token_index") {
        return Err(Error::CorruptCache(format!(
            "{}: header must start with token_index",
            csv_path.display()
        )));
    }
    let expert_ids: Vec<String> = cols
        .map(|c| {
            c.strip_prefix("expert_")
                .map(str::to_owned)
                .ok_or_else(|| {
                    Error::CorruptCache(format!("{}: bad column name {c:?}", csv_path.display()))
                })
        })
        .collect::<Result<_>>()?;

    let mut probs = Vec::new();
    for (j, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let index: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::CorruptCache(format!("{}: bad row {j}", csv_path.display())))?;
        if index != j {
            return Err(Error::CorruptCache(format!(
                "{}: row {j} has token_index {index}",
                csv_path.display()
            )));
        }
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::CorruptCache(format!("{}: bad probability {f:?} in row {j}", csv_path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != expert_ids.len() {
            return Err(Error::CorruptCache(format!(
                "{}: row {j} has {} probabilities, expected {}",
                csv_path.display(),
                row.len(),
                expert_ids.len()
            )));
        }
        probs.push(row);
    }

    let cache = ProbCache {
        domain_id: manifest.domain_id.clone(),
        expert_ids,
        probs,
    };
    cache.validate()?;
    if cache.expert_ids != manifest.expert_ids || cache.num_tokens() != manifest.num_tokens {
        return Err(Error::CorruptCache(format!(
            "{}: manifest does not match CSV contents",
            csv_path.display()
        )));
    }
    Ok((cache, manifest))
}
