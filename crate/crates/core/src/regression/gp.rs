//! Exact Gaussian-process regression per target domain.
//!
//! One squared-exponential kernel on standardized features serves every
//! domain; its hyperparameters are picked by grid search on the summed
//! log marginal likelihood. Each domain then gets its own posterior over
//! centered targets. Reported variance is for the latent function (no
//! observation noise added back).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxy::MeasurementSet;

use super::{prepare, Family, FeatureSpec, FitOptions, Model, Predictor, Standardizer};

const LENGTH_SCALE_GRID: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
const SIGNAL_VARIANCE_GRID: [f64; 3] = [0.5, 1.0, 2.0];
const NOISE_VARIANCE_GRID: [f64; 3] = [1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct GpDomain {
    pub y_mean: f64,
    /// K⁻¹(y − ȳ) for this domain's targets.
    pub alpha: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(a: &[f64], b: &[f64], h: &GpHyper) -> f64 {
    h.signal_variance * (-sq_dist(a, b) / (2.0 * h.length_scale * h.length_scale)).exp()
}

fn kernel_matrix(x: &[Vec<f64>], h: &GpHyper) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        kernel(&x[i], &x[j], h) + if i == j { h.noise_variance } else { 0.0 }
    })
}

fn log_marginal(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, y_centered: &DVector<f64>) -> f64 {
    let alpha = chol.solve(y_centered);
    let n = y_centered.len() as f64;
    let log_det_half: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * y_centered.dot(&alpha) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

pub fn fit_gp(
    data: &MeasurementSet,
    spec: &FeatureSpec,
    caches: Option<&crate::mde::CacheSet>,
    opts: &FitOptions,
) -> Result<Predictor> {
    let fd = prepare(data, spec, caches, opts.keep_corners(Family::Gp))?;
    let scaler = Standardizer::fit(&fd.features);
    let x = scaler.transform_all(&fd.features);
    let n = x.len();

    let centered: BTreeMap<&String, (f64, DVector<f64>)> = fd
        .targets
        .iter()
        .map(|(d, ys)| {
            let mean = ys.iter().sum::<f64>() / n as f64;
            (d, (mean, DVector::from_fn(n, |i, _| ys[i] - mean)))
        })
        .collect();

    let mut best: Option<(GpHyper, f64)> = None;
    for &length_scale in &LENGTH_SCALE_GRID {
        for &signal_variance in &SIGNAL_VARIANCE_GRID {
            for &noise_variance in &NOISE_VARIANCE_GRID {
                let hyper = GpHyper {
                    length_scale,
                    signal_variance,
                    noise_variance,
                };
                let Some(chol) = nalgebra::Cholesky::new(kernel_matrix(&x, &hyper)) else {
                    continue;
                };
                let total: f64 = centered.values().map(|(_, yc)| log_marginal(&chol, yc)).sum();
                if best.map_or(true, |(_, b)| total > b) {
                    best = Some((hyper, total));
                }
            }
        }
    }
    let Some((hyper, _)) = best else {
        return Err(Error::SingularKernel(format!(
            "kernel matrix is singular for every hyperparameter setting on {n} inputs; \
             deduplicate inputs or raise the noise floor"
        )));
    };

    let chol = nalgebra::Cholesky::new(kernel_matrix(&x, &hyper)).expect("selected setting factors");
    let l = chol.l();
    let l_factor: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..=i).map(|j| l[(i, j)]).collect())
        .collect();
    let per_domain = centered
        .into_iter()
        .map(|(d, (y_mean, yc))| {
            let alpha = chol.solve(&yc);
            (
                d.clone(),
                GpDomain {
                    y_mean,
                    alpha: alpha.iter().copied().collect(),
                },
            )
        })
        .collect();

    Ok(Predictor {
        feature_spec: spec.clone(),
        target_domains: fd.targets.keys().cloned().collect(),
        training_hash: None,
        model: Model::Gp {
            scaler,
            hyper,
            x_train: x,
            l_factor,
            per_domain,
        },
    })
}

/// Posterior means per domain and the shared latent variance at one
/// (already standardized) input.
pub(crate) fn predict(
    hyper: &GpHyper,
    x_train: &[Vec<f64>],
    l_factor: &[Vec<f64>],
    per_domain: &BTreeMap<String, GpDomain>,
    x: &[f64],
) -> (BTreeMap<String, f64>, f64) {
    let k_star: Vec<f64> = x_train.iter().map(|xi| kernel(x, xi, hyper)).collect();
    let means = per_domain
        .iter()
        .map(|(d, m)| {
            let dot: f64 = k_star.iter().zip(&m.alpha).map(|(k, a)| k * a).sum();
            (d.clone(), m.y_mean + dot)
        })
        .collect();

    // Forward substitution: v = L⁻¹ k*, then var = σf² − ‖v‖².
    let n = x_train.len();
    let mut v = vec![0.0; n];
    for i in 0..n {
        let mut s = k_star[i];
        for j in 0..i {
            s -= l_factor[i][j] * v[j];
        }
        v[i] = s / l_factor[i][i];
    }
    let reduction: f64 = v.iter().map(|a| a * a).sum();
    let variance = (hyper.signal_variance - reduction).clamp(0.0, hyper.signal_variance);
    (means, variance)
}
