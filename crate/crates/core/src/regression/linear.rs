//! Ridge regression per target domain with cross-validated strength.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::proxy::MeasurementSet;

use super::{
    effective_folds, fold_of, prepare, Family, FeatureSpec, FitOptions, Model, Predictor,
    Standardizer,
};

const ALPHA_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct LinearModel {
    pub alpha: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, standardized: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(standardized)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }
}

/// Solve (XᵀX + αI)β = Xᵀ(y − ȳ) on already-standardized rows. The
/// intercept is the target mean and stays unpenalized.
fn ridge_solve(x: &[Vec<f64>], y: &[f64], alpha: f64) -> LinearModel {
    let n = x.len();
    let dim = x.first().map(Vec::len).unwrap_or(0);
    let intercept = y.iter().sum::<f64>() / n as f64;
    if dim == 0 {
        return LinearModel {
            alpha,
            intercept,
            coefficients: Vec::new(),
        };
    }
    let xm = DMatrix::from_fn(n, dim, |i, j| x[i][j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - intercept);
    let mut a = xm.transpose() * &xm;
    for j in 0..dim {
        a[(j, j)] += alpha;
    }
    let b = xm.transpose() * yc;
    let beta = a
        .cholesky()
        .map(|ch| ch.solve(&b))
        .unwrap_or_else(|| DVector::zeros(dim));
    LinearModel {
        alpha,
        intercept,
        coefficients: beta.iter().copied().collect(),
    }
}

pub fn fit_linear(
    data: &MeasurementSet,
    spec: &FeatureSpec,
    caches: Option<&crate::mde::CacheSet>,
    opts: &FitOptions,
) -> Result<Predictor> {
    let fd = prepare(data, spec, caches, opts.keep_corners(Family::LinearRidge))?;
    let n = fd.features.len();
    let dim = fd.features[0].len();
    if n < opts.cv_folds.max(dim + 1) {
        log::warn!(
            "ridge fit on {n} records with {dim} features and {} requested folds; \
             expect weak regularization choices",
            opts.cv_folds
        );
    }

    let folds = effective_folds(n, opts.cv_folds);
    // Fold splits and their standardizers are target-independent.
    let splits: Vec<(Vec<usize>, Vec<usize>, Standardizer)> = if folds >= 2 {
        (0..folds)
            .map(|f| {
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for i in 0..n {
                    if fold_of(i, n, folds) == f {
                        test.push(i);
                    } else {
                        train.push(i);
                    }
                }
                let rows: Vec<Vec<f64>> = train.iter().map(|&i| fd.features[i].clone()).collect();
                let scaler = Standardizer::fit(&rows);
                (train, test, scaler)
            })
            .collect()
    } else {
        Vec::new()
    };

    let scaler = Standardizer::fit(&fd.features);
    let x_all = scaler.transform_all(&fd.features);
    let mut per_domain = std::collections::BTreeMap::new();
    for (domain, ys) in &fd.targets {
        let mut best = (ALPHA_GRID[0], f64::INFINITY);
        if !splits.is_empty() {
            for &alpha in &ALPHA_GRID {
                let mut pooled = 0.0;
                for (train, test, fold_scaler) in &splits {
                    let xt: Vec<Vec<f64>> = train
                        .iter()
                        .map(|&i| fold_scaler.transform(&fd.features[i]))
                        .collect();
                    let yt: Vec<f64> = train.iter().map(|&i| ys[i]).collect();
                    let model = ridge_solve(&xt, &yt, alpha);
                    for &i in test {
                        let pred = model.predict(&fold_scaler.transform(&fd.features[i]));
                        pooled += (pred - ys[i]) * (pred - ys[i]);
                    }
                }
                if pooled < best.1 {
                    best = (alpha, pooled);
                }
            }
        }
        per_domain.insert(domain.clone(), ridge_solve(&x_all, ys, best.0));
    }

    Ok(Predictor {
        feature_spec: spec.clone(),
        target_domains: fd.targets.keys().cloned().collect(),
        training_hash: None,
        model: Model::LinearRidge { scaler, per_domain },
    })
}
