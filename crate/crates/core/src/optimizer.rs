//! Derivative-free search for the mixture minimizing an aggregated
//! predicted loss.
//!
//! Stage 1 scores a seeded cloud of Dirichlet(𝟙) samples plus the corners
//! and the uniform point. Stage 2 refines the winner by exchange moves:
//! shift mass δ between every ordered pair of components, halving δ
//! whenever a full sweep yields no improvement. No gradients are assumed;
//! tree-based predictors are piecewise constant.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mde::{aggregate, Aggregator, CacheSet, MixtureWeights};
use crate::mixtures::smooth_mixture;
use crate::regression::Predictor;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub n_random: usize,
    pub n_refine_iters: usize,
    pub step_init: f64,
    pub tol: f64,
    pub seed: u64,
    pub smoothing: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            n_random: 4096,
            n_refine_iters: 200,
            step_init: 0.1,
            tol: 1e-6,
            seed: 0,
            smoothing: false,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_random == 0 {
            return Err(Error::config("optimizer.n_random", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("optimizer.tol", "must be positive"));
        }
        if !(self.step_init > 0.0) {
            return Err(Error::config("optimizer.step_init", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub best: MixtureWeights,
    pub smoothed: Option<MixtureWeights>,
    pub score: f64,
    pub evaluations: usize,
    pub skipped: usize,
}

impl OptimizeReport {
    /// The mixture a caller should use: smoothed when enabled, raw otherwise.
    pub fn selected(&self) -> &MixtureWeights {
        self.smoothed.as_ref().unwrap_or(&self.best)
    }
}

/// Prediction-backed objective: λ → aggregate(predict(λ)).
pub fn objective<'a>(
    predictor: &'a Predictor,
    aggregator: &'a Aggregator,
    caches: Option<&'a CacheSet>,
) -> impl Fn(&MixtureWeights) -> Result<f64> + Sync + 'a {
    move |lambda| {
        let losses = predictor.predict(lambda, caches)?;
        aggregate(&losses, aggregator)
    }
}

fn dirichlet_uniform(k: usize, seed: u64, index: u64) -> MixtureWeights {
    let mut rng = stream_rng(seed, "optimizer-candidate", index);
    loop {
        // Dirichlet(𝟙) as normalized unit exponentials.
        let draws: Vec<f64> = (0..k)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        if draws.iter().sum::<f64>() > 0.0 {
            return MixtureWeights::renormalized(draws).expect("positive finite draws");
        }
    }
}

/// Minimize an arbitrary objective over the k-simplex.
///
/// Candidates that fail to evaluate are skipped and counted; the report's
/// evaluation count includes those attempts.
pub fn search_simplex<F>(f: F, k: usize, cfg: &OptimizeConfig) -> Result<OptimizeReport>
where
    F: Fn(&MixtureWeights) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if k == 0 {
        return Err(Error::config("optimizer", "mixture needs at least one component"));
    }

    let mut candidates: Vec<MixtureWeights> = Vec::with_capacity(cfg.n_random + k + 1);
    for i in 0..cfg.n_random {
        candidates.push(dirichlet_uniform(k, cfg.seed, i as u64));
    }
    for i in 0..k {
        candidates.push(MixtureWeights::one_hot(k, i));
    }
    candidates.push(MixtureWeights::uniform(k));

    let scores: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|lambda| f(lambda).ok().filter(|s| s.is_finite()))
        .collect();

    let mut evaluations = candidates.len();
    let mut skipped = scores.iter().filter(|s| s.is_none()).count();
    let mut best: Option<(usize, f64)> = None;
    for (i, score) in scores.iter().enumerate() {
        if let Some(s) = score {
            if best.map_or(true, |(_, b)| *s < b) {
                best = Some((i, *s));
            }
        }
    }
    let Some((best_idx, mut best_score)) = best else {
        return Err(Error::OptimizationFailed(format!(
            "all {evaluations} candidate mixtures failed to evaluate"
        )));
    };
    let mut best_lambda = candidates[best_idx].clone();

    let mut step = cfg.step_init;
    for _ in 0..cfg.n_refine_iters {
        if step < cfg.tol {
            break;
        }
        let mut improved = false;
        for a in 0..k {
            for b in 0..k {
                if a == b || best_lambda[a] <= 0.0 {
                    continue;
                }
                let delta = step.min(best_lambda[a]);
                let mut moved = best_lambda.as_slice().to_vec();
                moved[a] -= delta;
                moved[b] += delta;
                let candidate =
                    MixtureWeights::renormalized(moved).expect("exchange keeps mass positive");
                evaluations += 1;
                match f(&candidate) {
                    Ok(s) if s.is_finite() => {
                        if s < best_score {
                            best_score = s;
                            best_lambda = candidate;
                            improved = true;
                        }
                    }
                    _ => skipped += 1,
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }

    let best = MixtureWeights::renormalized(best_lambda.as_slice().to_vec())
        .expect("search keeps the mixture valid");
    let smoothed = cfg.smoothing.then(|| smooth_mixture(&best));
    Ok(OptimizeReport {
        best,
        smoothed,
        score: best_score,
        evaluations,
        skipped,
    })
}

/// Search driven by a fitted predictor and an aggregator over its targets.
pub fn optimize(
    predictor: &Predictor,
    aggregator: &Aggregator,
    caches: Option<&CacheSet>,
    k: usize,
    cfg: &OptimizeConfig,
) -> Result<OptimizeReport> {
    aggregator.validate()?;
    for domain in aggregator.referenced_domains() {
        if !predictor.target_domains.iter().any(|d| d == domain) {
            return Err(Error::UnknownDomain(format!(
                "aggregator references {domain}, which the predictor does not target"
            )));
        }
    }
    search_simplex(objective(predictor, aggregator, caches), k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mde::mde_domain_loss;
    use crate::regression::{mde_direct, tests::toy_caches};

    fn quick() -> OptimizeConfig {
        OptimizeConfig {
            n_random: 512,
            ..OptimizeConfig::default()
        }
    }

    #[test]
    fn quadratic_bowl_minimizer_is_recovered() {
        let c = [0.2, 0.3, 0.5];
        let f = |l: &MixtureWeights| {
            Ok(c.iter().zip(l.as_slice()).map(|(c, l)| (l - c) * (l - c)).sum())
        };
        let report = search_simplex(f, 3, &quick()).unwrap();
        let l1: f64 = c
            .iter()
            .zip(report.best.as_slice())
            .map(|(c, l)| (l - c).abs())
            .sum();
        assert!(l1 <= 1e-3, "L1 distance {l1}");
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn linear_objective_returns_cheapest_corner() {
        let w = [3.0, 1.0, 2.0];
        let f = |l: &MixtureWeights| Ok(w.iter().zip(l.as_slice()).map(|(w, l)| w * l).sum());
        let report = search_simplex(f, 3, &quick()).unwrap();
        assert!((report.best[1] - 1.0).abs() <= 1e-5, "best {:?}", report.best);
        assert!((report.score - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn constant_objective_returns_valid_point() {
        let report = search_simplex(|_| Ok(7.25), 4, &quick()).unwrap();
        assert_eq!(report.score, 7.25);
        let sum: f64 = report.best.as_slice().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(report.best.as_slice().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn repeated_runs_are_identical() {
        let f = |l: &MixtureWeights| Ok((l[0] - 0.37) * (l[0] - 0.37) + 0.1 * l[1]);
        let a = search_simplex(f, 3, &quick()).unwrap();
        let b = search_simplex(f, 3, &quick()).unwrap();
        assert_eq!(a.best.as_slice(), b.best.as_slice());
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn failures_are_skipped_and_counted() {
        let f = |l: &MixtureWeights| {
            if l.as_slice().iter().any(|&w| w < 0.01) {
                Err(Error::OptimizationFailed("corner-shy objective".into()))
            } else {
                Ok((l[0] - 0.4) * (l[0] - 0.4))
            }
        };
        let report = search_simplex(f, 2, &quick()).unwrap();
        assert!(report.skipped > 0);
        assert!(report.skipped >= 2, "corners must fail");
        assert!((report.best[0] - 0.4).abs() <= 1e-3);
    }

    #[test]
    fn evaluation_count_is_exact_without_refinement() {
        let cfg = OptimizeConfig {
            n_random: 64,
            n_refine_iters: 0,
            ..OptimizeConfig::default()
        };
        let report = search_simplex(|_| Ok(1.0), 3, &cfg).unwrap();
        assert_eq!(report.evaluations, 64 + 3 + 1);
    }

    #[test]
    fn smoothing_keeps_result_strictly_positive() {
        let w = [3.0, 1.0, 2.0];
        let f = |l: &MixtureWeights| Ok(w.iter().zip(l.as_slice()).map(|(w, l)| w * l).sum());
        let cfg = OptimizeConfig {
            n_random: 128,
            smoothing: true,
            ..OptimizeConfig::default()
        };
        let report = search_simplex(f, 3, &cfg).unwrap();
        let smoothed = report.smoothed.as_ref().unwrap();
        assert!(smoothed.as_slice().iter().all(|&w| w > 0.0));
        assert_eq!(report.selected().as_slice(), smoothed.as_slice());
    }

    #[test]
    fn mde_direct_objective_matches_domain_loss() {
        let caches = toy_caches();
        let predictor = mde_direct(vec!["va".into()]);
        let aggregator = Aggregator::Weighted {
            weights: [("va".to_string(), 1.0)].into_iter().collect(),
        };
        let obj = objective(&predictor, &aggregator, Some(&caches));
        let lambda = MixtureWeights::new(vec![0.3, 0.7]).unwrap();
        let direct = mde_domain_loss(caches.get("va").unwrap(), &lambda).unwrap();
        assert_eq!(obj(&lambda).unwrap().to_bits(), direct.to_bits());
    }
}
