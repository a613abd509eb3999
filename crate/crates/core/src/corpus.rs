//! Token corpora: per-domain training data, validation sets, synthetic
//! generators, and mixed-corpus sampling.
//!
//! A corpus file is UTF-8 text holding unsigned decimal token ids separated
//! by ASCII whitespace. A synthetic domain is a Markov source: contexts are
//! token ids, `prefix_marginal` is the initial context distribution, and
//! `conditionals[x]` is the next-token distribution after context `x`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mde::MixtureWeights;
use crate::rng::stream_rng;

/// Tokens are drawn from mixed corpora in fixed-length runs of this size
/// unless the caller overrides it.
pub const DEFAULT_SEGMENT_LEN: usize = 64;

const DIST_TOL: f64 = 1e-12;

/// One training domain: an id, its token stream, and the shared vocab size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    pub id: String,
    pub tokens: Vec<u32>,
    pub vocab_size: u32,
}

impl DomainCorpus {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>, vocab_size: u32) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus(id));
        }
        for (position, &token) in tokens.iter().enumerate() {
            if token >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab_size,
                });
            }
        }
        Ok(Self {
            id,
            tokens,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Canonical text form: ids joined by single spaces, trailing newline.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{t}");
        }
        out.push('\n');
        out
    }
}

/// Which aggregator group a validation domain reports under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainGroup {
    /// Held-out data from a pre-training source.
    SpLike,
    /// End-task style validation data.
    EtLike,
}

/// A held-out token set on which cross-entropy is measured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationDomain {
    pub id: String,
    pub tokens: Vec<u32>,
    pub group: DomainGroup,
}

impl ValidationDomain {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>, group: DomainGroup) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus(id));
        }
        Ok(Self { id, tokens, group })
    }

    pub fn from_corpus(corpus: &DomainCorpus, group: DomainGroup) -> Self {
        Self {
            id: corpus.id.clone(),
            tokens: corpus.tokens.clone(),
            group,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Generator for a synthetic Markov domain with known ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub vocab_size: u32,
    /// Distribution of the (hidden) initial context.
    pub prefix_marginal: Vec<f64>,
    /// `conditionals[x][y]` = P(next = y | context = x).
    pub conditionals: Vec<Vec<f64>>,
    pub seed: u64,
}

fn check_distribution(name: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidDistribution(format!(
            "{name}: expected {len} entries, got {}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{name}: entries must be finite and non-negative"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{name}: sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size as usize;
        if v == 0 {
            return Err(Error::InvalidDistribution("vocab_size must be positive".into()));
        }
        check_distribution("prefix_marginal", &self.prefix_marginal, v)?;
        if self.conditionals.len() != v {
            return Err(Error::InvalidDistribution(format!(
                "conditionals: expected {v} rows, got {}",
                self.conditionals.len()
            )));
        }
        for (x, row) in self.conditionals.iter().enumerate() {
            check_distribution(&format!("conditionals[{x}]"), row, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, "synthetic spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Random spec whose conditional table is doubly stochastic, so the
    /// uniform prefix marginal is stationary for the chain. Larger
    /// `sharpness` makes rows closer to uniform; small values (< 1) make
    /// them peaked, which is what separates domains from one another.
    pub fn random_doubly_stochastic(vocab_size: u32, sharpness: f64, seed: u64) -> Self {
        use rand_distr::{Distribution, Gamma};
        let v = vocab_size as usize;
        assert!(v >= 1, "vocab_size must be positive");
        assert!(sharpness > 0.0, "sharpness must be positive");
        let mut rng = stream_rng(seed, "synthetic-spec", 0);
        let gamma = Gamma::new(sharpness, 1.0).expect("valid gamma");
        let mut m = vec![vec![0.0f64; v]; v];
        for row in &mut m {
            for cell in row.iter_mut() {
                // Tiny floor keeps Sinkhorn scaling away from zero rows.
                *cell = gamma.sample(&mut rng).max(1e-9);
            }
        }
        // Sinkhorn: alternate row and column normalization.
        for _ in 0..500 {
            for row in &mut m {
                let s: f64 = row.iter().sum();
                for cell in row.iter_mut() {
                    *cell /= s;
                }
            }
            for y in 0..v {
                let s: f64 = m.iter().map(|row| row[y]).sum();
                for row in &mut m {
                    row[y] /= s / 1.0;
                }
            }
        }
        // Finish on a row normalization so each conditional sums to 1 exactly
        // within float error.
        for row in &mut m {
            let s: f64 = row.iter().sum();
            for cell in row.iter_mut() {
                *cell /= s;
            }
        }
        Self {
            vocab_size,
            prefix_marginal: vec![1.0 / v as f64; v],
            conditionals: m,
            seed,
        }
    }
}

/// Parse a whitespace-separated token file into a corpus. The domain id is
/// the file stem.
pub fn load_domain(path: impl AsRef<Path>, vocab_size: u32) -> Result<DomainCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".to_string());
    let mut tokens = Vec::new();
    for (position, word) in text.split_ascii_whitespace().enumerate() {
        let token: u32 = word.parse().map_err(|_| {
            Error::parse(path, format!("token {position}"), format!("not an unsigned integer: {word:?}"))
        })?;
        if token >= vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                position,
                vocab_size,
            });
        }
        tokens.push(token);
    }
    if tokens.is_empty() {
        return Err(Error::EmptyCorpus(id));
    }
    Ok(DomainCorpus {
        id,
        tokens,
        vocab_size,
    })
}

/// Write a corpus in canonical text form.
pub fn save_domain(corpus: &DomainCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus.to_text()).map_err(|e| Error::io(path, e))
}

/// Draw `n_tokens` from a synthetic Markov source. The initial context is
/// drawn from `prefix_marginal` and is not emitted; every emitted token is a
/// conditional draw given the previous emitted token (or the initial
/// context for the first one).
pub fn generate_synthetic_domain(
    id: impl Into<String>,
    spec: &SyntheticDomainSpec,
    n_tokens: usize,
) -> Result<DomainCorpus> {
    spec.validate()?;
    assert!(n_tokens >= 1, "n_tokens must be positive");
    let mut rng = stream_rng(spec.seed, "synthetic-tokens", 0);
    let mut context = draw_categorical(&mut rng, &spec.prefix_marginal);
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let next = draw_categorical(&mut rng, &spec.conditionals[context]) as u32;
        tokens.push(next);
        context = next as usize;
    }
    DomainCorpus::new(id, tokens, spec.vocab_size)
}

fn draw_categorical(rng: &mut impl Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * dist.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Float round-off can leave u marginally above the final cumulative sum;
    // fall back to the last positive-mass entry.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

/// Sample a mixed corpus: segment `j` picks a source domain with
/// probability `lambda_i` and copies a uniformly placed run of tokens from
/// it, using the `(seed, j)` stream so segments are independent of
/// evaluation order.
pub fn sample_mixed_corpus(
    domains: &[DomainCorpus],
    lambda: &MixtureWeights,
    n_tokens: usize,
    seed: u64,
) -> Result<DomainCorpus> {
    sample_mixed_corpus_with(domains, lambda, n_tokens, seed, DEFAULT_SEGMENT_LEN)
}

pub fn sample_mixed_corpus_with(
    domains: &[DomainCorpus],
    lambda: &MixtureWeights,
    n_tokens: usize,
    seed: u64,
    segment_len: usize,
) -> Result<DomainCorpus> {
    if domains.len() != lambda.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} domains vs {} mixture weights",
            domains.len(),
            lambda.len()
        )));
    }
    if domains.is_empty() {
        return Err(Error::DimensionMismatch("no domains to mix".into()));
    }
    assert!(n_tokens >= 1, "n_tokens must be positive");
    assert!(segment_len >= 1, "segment_len must be positive");
    let vocab_size = domains[0].vocab_size;
    for d in domains {
        if d.vocab_size != vocab_size {
            return Err(Error::VocabMismatch {
                expected: vocab_size,
                got: d.vocab_size,
                context: format!("domain {}", d.id),
            });
        }
    }

    let mut tokens = Vec::with_capacity(n_tokens);
    let mut segment = 0u64;
    while tokens.len() < n_tokens {
        let mut rng = stream_rng(seed, "mixed-segment", segment);
        let domain = &domains[draw_categorical(&mut rng, lambda.as_slice())];
        let run = segment_len.min(domain.len());
        let start = rng.random_range(0..=domain.len() - run);
        let take = run.min(n_tokens - tokens.len());
        tokens.extend_from_slice(&domain.tokens[start..start + take]);
        segment += 1;
    }
    DomainCorpus::new(format!("mix-{seed:016x}"), tokens, vocab_size)
}
