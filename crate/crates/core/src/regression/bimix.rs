//! Per-domain power law: L_d(λ) = A_d / λ_d^α_d, fitted in log-log space.
//!
//! Each domain's loss is regressed on that domain's own weight only.
//! Records where the domain has zero weight are skipped with a warning
//! because ln λ_d is undefined there; by the same token the fitted curve
//! cannot be evaluated at λ_d = 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mde::MixtureWeights;
use crate::proxy::MeasurementSet;

use super::{prepare, Family, FeatureSpec, FitOptions, Model, Predictor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimixParams {
    /// Domain index the weight is read from.
    pub index: usize,
    pub a: f64,
    pub alpha: f64,
}

impl BimixParams {
    pub fn predict(&self, lambda: &MixtureWeights) -> Result<f64> {
        if self.index >= lambda.len() {
            return Err(Error::DimensionMismatch(format!(
                "power-law fit reads component {} but the mixture has {}",
                self.index,
                lambda.len()
            )));
        }
        let w = lambda[self.index];
        if w <= 0.0 {
            return Err(Error::ZeroWeightPowerLaw(format!(
                "power law is undefined at zero weight for component {}",
                self.index
            )));
        }
        Ok(self.a / w.powf(self.alpha))
    }
}

pub fn fit_bimix(data: &MeasurementSet, opts: &FitOptions) -> Result<Predictor> {
    let spec = FeatureSpec::lambda_only();
    let fd = prepare(data, &spec, None, opts.keep_corners(Family::Bimix))?;
    let domains: Vec<String> = fd.targets.keys().cloned().collect();

    let components = data.num_mixture_components();
    let mut per_domain = BTreeMap::new();
    // Convention: target domain at sorted position i reads mixture component i.
    for (index, domain) in domains.iter().enumerate() {
        if index >= components {
            return Err(Error::DimensionMismatch(format!(
                "power-law fit needs one mixture component per target domain; \
                 domain {domain} is position {index} of a {components}-component mixture"
            )));
        }
        let ys = &fd.targets[domain];
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        let mut skipped = 0usize;
        for (lam, &y) in fd.lambdas.iter().zip(ys) {
            let w = lam[index];
            if w <= 0.0 {
                skipped += 1;
                continue;
            }
            if y <= 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "power-law fit needs positive losses, domain {domain} has {y}"
                )));
            }
            xs.push(w.ln());
            zs.push(y.ln());
        }
        if skipped > 0 {
            log::warn!(
                "power-law fit for domain {domain} skipped {skipped} zero-weight records"
            );
        }
        if xs.is_empty() {
            return Err(Error::ZeroWeightPowerLaw(format!(
                "every record gives domain {domain} zero weight; its power law is undefined"
            )));
        }

        let n = xs.len() as f64;
        let x_mean = xs.iter().sum::<f64>() / n;
        let z_mean = zs.iter().sum::<f64>() / n;
        let var: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
        let (a, alpha) = if var == 0.0 {
            // One distinct weight: slope is unidentifiable, keep a flat law
            // through the geometric mean of the observed losses.
            (z_mean.exp(), 0.0)
        } else {
            let cov: f64 = xs
                .iter()
                .zip(&zs)
                .map(|(x, z)| (x - x_mean) * (z - z_mean))
                .sum();
            let slope = cov / var;
            ((z_mean - slope * x_mean).exp(), -slope)
        };
        per_domain.insert(
            domain.clone(),
            BimixParams { index, a, alpha },
        );
    }

    Ok(Predictor {
        feature_spec: spec,
        target_domains: domains,
        training_hash: None,
        model: Model::Bimix { per_domain },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::tests::toy_set;

    #[test]
    fn recovers_power_law_coefficients() {
        let rows: Vec<_> = [0.25f64, 0.5, 1.0]
            .iter()
            .map(|&l1| {
                (
                    vec![l1, 1.0 - l1],
                    vec![("d0", 2.0 / l1.sqrt()), ("d1", 3.0_f64)],
                )
            })
            .collect();
        let p = fit_bimix(&toy_set(&rows), &FitOptions::default()).unwrap();
        match &p.model {
            Model::Bimix { per_domain } => {
                let d0 = &per_domain["d0"];
                assert!((d0.a - 2.0).abs() < 1e-9, "A = {}", d0.a);
                assert!((d0.alpha - 0.5).abs() < 1e-9, "alpha = {}", d0.alpha);
                assert_eq!(d0.index, 0);
                assert_eq!(per_domain["d1"].index, 1);
            }
            _ => unreachable!(),
        }
        let lambda = MixtureWeights::new(vec![0.64, 0.36]).unwrap();
        let pred = p.predict(&lambda, None).unwrap().get("d0").unwrap();
        assert!((pred - 2.0 / 0.8).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_prediction_is_an_error() {
        let rows: Vec<_> = [0.25f64, 0.5, 1.0]
            .iter()
            .map(|&l1| (vec![l1, 1.0 - l1], vec![("d0", 2.0 / l1.sqrt())]))
            .collect();
        let p = fit_bimix(&toy_set(&rows), &FitOptions::default()).unwrap();
        let lambda = MixtureWeights::new(vec![0.0, 1.0]).unwrap();
        let err = p.predict(&lambda, None).unwrap_err();
        assert!(matches!(err, Error::ZeroWeightPowerLaw(_)));
    }

    #[test]
    fn single_distinct_weight_gives_flat_law() {
        let rows = vec![
            (vec![0.5, 0.5], vec![("d0", 2.0_f64)]),
            (vec![0.5, 0.5], vec![("d0", 8.0_f64)]),
        ];
        let p = fit_bimix(&toy_set(&rows), &FitOptions::default()).unwrap();
        match &p.model {
            Model::Bimix { per_domain } => {
                let d0 = &per_domain["d0"];
                assert_eq!(d0.alpha, 0.0);
                assert!((d0.a - 4.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn increasing_loss_in_weight_gives_negative_alpha() {
        let rows: Vec<_> = [0.2, 0.4, 0.8]
            .iter()
            .map(|&l1| (vec![l1, 1.0 - l1], vec![("d0", 1.0 + l1)]))
            .collect();
        let p = fit_bimix(&toy_set(&rows), &FitOptions::default()).unwrap();
        match &p.model {
            Model::Bimix { per_domain } => assert!(per_domain["d0"].alpha < 0.0),
            _ => unreachable!(),
        }
    }
}
