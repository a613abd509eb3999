//! Exact finite-distribution checks of the mixture-ensemble identity.
//!
//! Over finite prefix and token sets, the optimal model of a λ-mixture
//! has a closed form, and so does its rewriting as a prefix-reweighted
//! combination of per-domain optimal models. `verify_proposition` checks
//! the two agree; `mde_gap` measures how far the x-independent ensemble
//! (weights λ for every prefix) is from the true optimum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mde::MixtureWeights;
use crate::rng::stream_rng;

const SUM_TOL: f64 = 1e-12;

/// One domain as an explicit prefix marginal and conditional table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDomain {
    /// D(x) over prefixes, indexed 0..|X|.
    pub prefix_marginal: Vec<f64>,
    /// D(y|x): one row per prefix, |Y| entries each.
    pub conditionals: Vec<Vec<f64>>,
}

impl FiniteDomain {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_marginal.is_empty() {
            return Err(Error::InvalidDistribution("empty prefix set".into()));
        }
        if self.conditionals.len() != self.prefix_marginal.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} conditional rows for {} prefixes",
                self.conditionals.len(),
                self.prefix_marginal.len()
            )));
        }
        check_distribution(&self.prefix_marginal, "prefix marginal")?;
        let width = self.conditionals[0].len();
        for (x, row) in self.conditionals.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidDistribution(format!(
                    "conditional row {x} has {} entries, expected {width}",
                    row.len()
                )));
            }
            check_distribution(row, &format!("conditional row {x}"))?;
        }
        Ok(())
    }

    pub fn num_prefixes(&self) -> usize {
        self.prefix_marginal.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.conditionals[0].len()
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{what} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn check_instance(domains: &[FiniteDomain], lambda: &MixtureWeights) -> Result<()> {
    if domains.is_empty() {
        return Err(Error::InvalidDistribution("no domains given".into()));
    }
    if lambda.len() != domains.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mixture components for {} domains",
            lambda.len(),
            domains.len()
        )));
    }
    let nx = domains[0].num_prefixes();
    let ny = domains[0].vocab_size();
    for (i, d) in domains.iter().enumerate() {
        d.validate()?;
        if d.num_prefixes() != nx || d.vocab_size() != ny {
            return Err(Error::DimensionMismatch(format!(
                "domain {i} has shape ({}, {}), expected ({nx}, {ny})",
                d.num_prefixes(),
                d.vocab_size()
            )));
        }
    }
    Ok(())
}

/// Conditional table over the shared prefix set; rows with zero mixture
/// mass are undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    pub rows: Vec<Option<Vec<f64>>>,
}

impl ConditionalTable {
    pub fn defined(&self, x: usize) -> Option<&[f64]> {
        self.rows.get(x).and_then(|r| r.as_deref())
    }
}

/// Mixture prefix mass Σᵢ λᵢ Dᵢ(x) for each x.
fn prefix_mass(domains: &[FiniteDomain], lambda: &MixtureWeights) -> Vec<f64> {
    let nx = domains[0].num_prefixes();
    (0..nx)
        .map(|x| {
            domains
                .iter()
                .enumerate()
                .map(|(i, d)| lambda[i] * d.prefix_marginal[x])
                .sum()
        })
        .collect()
}

/// The conditional the λ-weighted joint induces: the model a maximum
/// likelihood fit on mixed data converges to.
pub fn optimal_mixture_model(
    domains: &[FiniteDomain],
    lambda: &MixtureWeights,
) -> Result<ConditionalTable> {
    check_instance(domains, lambda)?;
    let ny = domains[0].vocab_size();
    let mass = prefix_mass(domains, lambda);
    let rows = mass
        .iter()
        .enumerate()
        .map(|(x, &denom)| {
            if denom <= 0.0 {
                return None;
            }
            let row = (0..ny)
                .map(|y| {
                    let joint: f64 = domains
                        .iter()
                        .enumerate()
                        .map(|(i, d)| lambda[i] * d.prefix_marginal[x] * d.conditionals[x][y])
                        .sum();
                    joint / denom
                })
                .collect();
            Some(row)
        })
        .collect();
    Ok(ConditionalTable { rows })
}

/// The same distribution assembled the ensemble way: per-prefix weights
/// λ′ᵢ(x) ∝ λᵢ Dᵢ(x) applied to each domain's own conditional.
pub fn expert_combination(
    domains: &[FiniteDomain],
    lambda: &MixtureWeights,
) -> Result<ConditionalTable> {
    check_instance(domains, lambda)?;
    let ny = domains[0].vocab_size();
    let mass = prefix_mass(domains, lambda);
    let rows = mass
        .iter()
        .enumerate()
        .map(|(x, &denom)| {
            if denom <= 0.0 {
                return None;
            }
            let reweighted: Vec<f64> = domains
                .iter()
                .enumerate()
                .map(|(i, d)| lambda[i] * d.prefix_marginal[x] / denom)
                .collect();
            let row = (0..ny)
                .map(|y| {
                    reweighted
                        .iter()
                        .zip(domains)
                        .map(|(w, d)| w * d.conditionals[x][y])
                        .sum()
                })
                .collect();
            Some(row)
        })
        .collect();
    Ok(ConditionalTable { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropositionReport {
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Compare the two constructions pointwise over defined rows.
pub fn verify_proposition(
    domains: &[FiniteDomain],
    lambda: &MixtureWeights,
    tol: f64,
) -> Result<PropositionReport> {
    let optimal = optimal_mixture_model(domains, lambda)?;
    let combined = expert_combination(domains, lambda)?;
    let mut max_abs_diff = 0.0f64;
    for (a, b) in optimal.rows.iter().zip(&combined.rows) {
        debug_assert_eq!(a.is_some(), b.is_some(), "identical denominators");
        if let (Some(ra), Some(rb)) = (a, b) {
            for (va, vb) in ra.iter().zip(rb) {
                max_abs_diff = max_abs_diff.max((va - vb).abs());
            }
        }
    }
    Ok(PropositionReport {
        max_abs_diff,
        pass: max_abs_diff <= tol,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdeGapReport {
    /// max over defined (x,y) of |p*(y|x) − Σᵢ λᵢ Dᵢ(y|x)|.
    pub max_pointwise_gap: f64,
    /// Cross-entropy of the x-independent combination under the mixture
    /// minus the optimal loss; non-negative.
    pub expected_loss_gap: f64,
}

/// Distance between the true optimum and the prefix-independent ensemble
/// that reuses λ at every x.
pub fn mde_gap(domains: &[FiniteDomain], lambda: &MixtureWeights) -> Result<MdeGapReport> {
    let optimal = optimal_mixture_model(domains, lambda)?;
    let mass = prefix_mass(domains, lambda);
    let ny = domains[0].vocab_size();

    let mut max_pointwise_gap = 0.0f64;
    let mut expected_loss_gap = 0.0f64;
    for (x, row) in optimal.rows.iter().enumerate() {
        let Some(row) = row else { continue };
        for y in 0..ny {
            let ensemble: f64 = domains
                .iter()
                .enumerate()
                .map(|(i, d)| lambda[i] * d.conditionals[x][y])
                .sum();
            max_pointwise_gap = max_pointwise_gap.max((row[y] - ensemble).abs());
            if row[y] > 0.0 {
                expected_loss_gap += mass[x] * row[y] * (row[y].ln() - ensemble.ln());
            }
        }
    }
    Ok(MdeGapReport {
        max_pointwise_gap,
        expected_loss_gap,
    })
}

/// Seeded random instance within the given size caps; all probabilities
/// strictly positive so every row is defined.
pub fn random_instance(
    seed: u64,
    index: u64,
    k_max: usize,
    x_max: usize,
    y_max: usize,
) -> (Vec<FiniteDomain>, MixtureWeights) {
    assert!(k_max >= 1 && x_max >= 1 && y_max >= 1);
    let mut rng = stream_rng(seed, "oracle-instance", index);
    let k = rng.random_range(1..=k_max);
    let nx = rng.random_range(1..=x_max);
    let ny = rng.random_range(1..=y_max);
    let mut positive_simplex = |n: usize| -> Vec<f64> {
        let draws: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.05)).collect();
        let sum: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / sum).collect()
    };
    let domains = (0..k)
        .map(|_| FiniteDomain {
            prefix_marginal: positive_simplex(nx),
            conditionals: (0..nx).map(|_| positive_simplex(ny)).collect(),
        })
        .collect();
    let lambda = MixtureWeights::new(positive_simplex(k)).expect("simplex by construction");
    (domains, lambda)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub seed: u64,
    pub instances: u64,
    pub tol: f64,
    pub max_abs_diff: f64,
    pub failed_instances: Vec<u64>,
    pub pass: bool,
}

/// Run `verify_proposition` on a sweep of seeded random instances.
pub fn verify_random_instances(
    seed: u64,
    instances: u64,
    k_max: usize,
    x_max: usize,
    y_max: usize,
    tol: f64,
) -> Result<BatchReport> {
    let mut max_abs_diff = 0.0f64;
    let mut failed_instances = Vec::new();
    for index in 0..instances {
        let (domains, lambda) = random_instance(seed, index, k_max, x_max, y_max);
        let report = verify_proposition(&domains, &lambda, tol)?;
        max_abs_diff = max_abs_diff.max(report.max_abs_diff);
        if !report.pass {
            failed_instances.push(index);
        }
    }
    Ok(BatchReport {
        seed,
        instances,
        tol,
        max_abs_diff,
        failed_instances: failed_instances.clone(),
        pass: failed_instances.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_instance() -> (Vec<FiniteDomain>, MixtureWeights) {
        let d1 = FiniteDomain {
            prefix_marginal: vec![0.5, 0.5],
            conditionals: vec![vec![0.9, 0.1], vec![0.3, 0.7]],
        };
        let d2 = FiniteDomain {
            prefix_marginal: vec![0.25, 0.75],
            conditionals: vec![vec![0.5, 0.5], vec![0.6, 0.4]],
        };
        (vec![d1, d2], MixtureWeights::new(vec![0.5, 0.5]).unwrap())
    }

    #[test]
    fn hand_instance_optimal_value() {
        let (domains, lambda) = hand_instance();
        let table = optimal_mixture_model(&domains, &lambda).unwrap();
        let row = table.defined(0).unwrap();
        assert!((row[0] - 0.2875 / 0.375).abs() < 1e-15);
        assert!((row[0] - 0.766667).abs() < 1e-6);
    }

    #[test]
    fn hand_instance_combination_weights() {
        let (domains, lambda) = hand_instance();
        let table = expert_combination(&domains, &lambda).unwrap();
        let row = table.defined(0).unwrap();
        let expected = (2.0 / 3.0) * 0.9 + (1.0 / 3.0) * 0.5;
        assert!((row[0] - expected).abs() < 1e-15);
        let report = verify_proposition(&domains, &lambda, 1e-12).unwrap();
        assert!(report.pass, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn hand_instance_ensemble_gap() {
        let (domains, lambda) = hand_instance();
        let report = mde_gap(&domains, &lambda).unwrap();
        assert!(
            (report.max_pointwise_gap - (0.2875 / 0.375 - 0.7)).abs() < 1e-12,
            "gap {}",
            report.max_pointwise_gap
        );
        assert!(report.expected_loss_gap > 0.0);
    }

    #[test]
    fn identical_domains_reproduce_their_conditional() {
        let d = FiniteDomain {
            prefix_marginal: vec![0.2, 0.8],
            conditionals: vec![vec![0.7, 0.3], vec![0.1, 0.9]],
        };
        for lam in [vec![0.5, 0.5], vec![0.9, 0.1], vec![0.25, 0.75]] {
            let lambda = MixtureWeights::new(lam).unwrap();
            let table = optimal_mixture_model(&[d.clone(), d.clone()], &lambda).unwrap();
            for x in 0..2 {
                let row = table.defined(x).unwrap();
                for y in 0..2 {
                    assert!((row[y] - d.conditionals[x][y]).abs() < 1e-15);
                }
            }
            let gap = mde_gap(&[d.clone(), d.clone()], &lambda).unwrap();
            assert!(gap.max_pointwise_gap < 1e-15);
            assert!(gap.expected_loss_gap.abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_mixture_selects_that_domain() {
        let (domains, _) = hand_instance();
        let lambda = MixtureWeights::one_hot(2, 1);
        let table = optimal_mixture_model(&domains, &lambda).unwrap();
        for x in 0..2 {
            let row = table.defined(x).unwrap();
            for y in 0..2 {
                assert!((row[y] - domains[1].conditionals[x][y]).abs() < 1e-15);
            }
        }
        let gap = mde_gap(&domains, &lambda).unwrap();
        assert!(gap.max_pointwise_gap < 1e-15);
        assert!(gap.expected_loss_gap.abs() < 1e-15);
    }

    #[test]
    fn single_domain_diff_is_exactly_zero() {
        let d = FiniteDomain {
            prefix_marginal: vec![0.25, 0.75],
            conditionals: vec![vec![0.75, 0.25], vec![0.5, 0.5]],
        };
        let lambda = MixtureWeights::new(vec![1.0]).unwrap();
        let report = verify_proposition(&[d], &lambda, 0.0).unwrap();
        assert_eq!(report.max_abs_diff, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn shared_prefix_marginals_make_the_ensemble_exact() {
        for seed in 0..50u64 {
            let (mut domains, lambda) = random_instance(seed, 0, 4, 5, 6);
            let shared = domains[0].prefix_marginal.clone();
            for d in &mut domains {
                d.prefix_marginal = shared.clone();
            }
            let gap = mde_gap(&domains, &lambda).unwrap();
            assert!(gap.max_pointwise_gap <= 1e-12, "seed {seed}");
            assert!(gap.expected_loss_gap.abs() <= 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn zero_mass_prefix_is_undefined_everywhere() {
        let d1 = FiniteDomain {
            prefix_marginal: vec![0.5, 0.5, 0.0],
            conditionals: vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.5, 0.5]],
        };
        let d2 = FiniteDomain {
            prefix_marginal: vec![0.25, 0.75, 0.0],
            conditionals: vec![vec![0.5, 0.5], vec![0.6, 0.4], vec![0.5, 0.5]],
        };
        let lambda = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        let table = optimal_mixture_model(&[d1.clone(), d2.clone()], &lambda).unwrap();
        assert!(table.defined(2).is_none());
        assert!(table.defined(0).is_some());
        let report = verify_proposition(&[d1, d2], &lambda, 1e-12).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn random_instances_always_verify() {
        let report = verify_random_instances(2024, 1000, 4, 5, 6, 1e-12).unwrap();
        assert!(report.pass, "failures: {:?}", report.failed_instances);
    }

    #[test]
    fn expected_loss_gap_is_never_negative() {
        for seed in 0..200u64 {
            let (domains, lambda) = random_instance(seed, 1, 4, 5, 6);
            let gap = mde_gap(&domains, &lambda).unwrap();
            assert!(gap.expected_loss_gap >= -1e-15, "seed {seed}: {}", gap.expected_loss_gap);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let d1 = FiniteDomain {
            prefix_marginal: vec![1.0],
            conditionals: vec![vec![0.5, 0.5]],
        };
        let d2 = FiniteDomain {
            prefix_marginal: vec![0.5, 0.5],
            conditionals: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        let lambda = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        assert!(optimal_mixture_model(&[d1, d2], &lambda).is_err());
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let bad = FiniteDomain {
            prefix_marginal: vec![0.6, 0.6],
            conditionals: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        assert!(bad.validate().is_err());
        let negative = FiniteDomain {
            prefix_marginal: vec![1.5, -0.5],
            conditionals: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        assert!(negative.validate().is_err());
    }
}
