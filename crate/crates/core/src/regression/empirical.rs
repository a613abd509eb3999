//! Constant-per-domain baseline: predict each domain's training mean loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::proxy::MeasurementSet;

use super::{FeatureSpec, Model, Predictor};

pub fn fit_empirical_mean(data: &MeasurementSet) -> Result<Predictor> {
    data.validate()?;
    if data.records.is_empty() {
        return Err(Error::InsufficientData("no records to average".into()));
    }
    let n = data.records.len() as f64;
    let mut means: BTreeMap<String, f64> = BTreeMap::new();
    for r in &data.records {
        for (d, &l) in &r.losses.per_domain {
            *means.entry(d.clone()).or_insert(0.0) += l / n;
        }
    }
    Ok(Predictor {
        feature_spec: FeatureSpec::lambda_only(),
        target_domains: means.keys().cloned().collect(),
        training_hash: None,
        model: Model::EmpiricalMean { means },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mde::MixtureWeights;
    use crate::regression::tests::toy_set;

    #[test]
    fn predicts_training_mean_for_any_mixture() {
        let data = toy_set(&[
            (vec![1.0, 0.0], vec![("d", 1.0)]),
            (vec![0.0, 1.0], vec![("d", 3.0)]),
        ]);
        let p = fit_empirical_mean(&data).unwrap();
        for lambda in [
            MixtureWeights::uniform(2),
            MixtureWeights::new(vec![0.9, 0.1]).unwrap(),
            MixtureWeights::one_hot(2, 1),
        ] {
            let pred = p.predict(&lambda, None).unwrap();
            assert!((pred.get("d").unwrap() - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_record_predicts_itself() {
        let data = toy_set(&[(vec![0.4, 0.6], vec![("d", 1.7), ("e", 0.3)])]);
        let p = fit_empirical_mean(&data).unwrap();
        let pred = p.predict(&MixtureWeights::uniform(2), None).unwrap();
        assert!((pred.get("d").unwrap() - 1.7).abs() < 1e-15);
        assert!((pred.get("e").unwrap() - 0.3).abs() < 1e-15);
    }
}
