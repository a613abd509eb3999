//! Surrogate predictors mapping a mixture to per-domain validation losses.
//!
//! Each family fits one model per target domain on measurement records.
//! Features are the mixture weights, the ensemble loss estimates, or both
//! concatenated. One-hot corner records participate according to each
//! family's default (kept for GP-style models, dropped for linear and
//! boosted trees) unless the caller overrides the policy.

mod bimix;
mod dml;
mod empirical;
mod gbm;
mod gp;
mod linear;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bimix::BimixParams;
pub use dml::DmlParams;
pub use gbm::GbmConfig;
pub use gp::GpHyper;

use crate::error::{Error, Result};
use crate::mde::{mde_domain_loss, CacheSet, LossVector, MixtureWeights};
use crate::proxy::MeasurementSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    LambdaOnly,
    MdeOnly,
    LambdaMde,
}

/// Which inputs a predictor sees for each mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub mode: FeatureMode,
    /// Ordered domain ids whose ensemble losses become features.
    pub mde_domain_subset: Vec<String>,
}

impl FeatureSpec {
    pub fn lambda_only() -> Self {
        Self {
            mode: FeatureMode::LambdaOnly,
            mde_domain_subset: Vec::new(),
        }
    }

    pub fn mde_only(subset: Vec<String>) -> Self {
        Self {
            mode: FeatureMode::MdeOnly,
            mde_domain_subset: subset,
        }
    }

    pub fn lambda_mde(subset: Vec<String>) -> Self {
        Self {
            mode: FeatureMode::LambdaMde,
            mde_domain_subset: subset,
        }
    }

    pub fn uses_mde(&self) -> bool {
        !matches!(self.mode, FeatureMode::LambdaOnly)
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            FeatureMode::LambdaOnly => "lambda-only",
            FeatureMode::MdeOnly => "mde-only",
            FeatureMode::LambdaMde => "lambda-mde",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_mde() && self.mde_domain_subset.is_empty() {
            return Err(Error::config(
                "feature_spec.mde_domain_subset",
                "must name at least one domain when the mode includes ensemble features",
            ));
        }
        Ok(())
    }
}

/// Feature vector for one mixture under a feature spec.
pub fn build_features(
    lambda: &MixtureWeights,
    caches: Option<&CacheSet>,
    spec: &FeatureSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = Vec::new();
    if matches!(spec.mode, FeatureMode::LambdaOnly | FeatureMode::LambdaMde) {
        out.extend_from_slice(lambda.as_slice());
    }
    if spec.uses_mde() {
        let caches = caches.ok_or_else(|| {
            Error::config("caches", "ensemble features requested but no caches supplied")
        })?;
        for d in &spec.mde_domain_subset {
            let cache = caches
                .get(d)
                .ok_or_else(|| Error::UnknownDomain(d.clone()))?;
            out.push(mde_domain_loss(cache, lambda)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    EmpiricalMean,
    LinearRidge,
    Gbm,
    Gp,
    Dml,
    Bimix,
    MdeDirect,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::EmpiricalMean,
        Family::LinearRidge,
        Family::Gbm,
        Family::Gp,
        Family::Dml,
        Family::Bimix,
        Family::MdeDirect,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::EmpiricalMean => "empirical-mean",
            Family::LinearRidge => "linear-ridge",
            Family::Gbm => "gbm",
            Family::Gp => "gp",
            Family::Dml => "dml",
            Family::Bimix => "bimix",
            Family::MdeDirect => "mde-direct",
        }
    }

    /// Whether one-hot corner records join the fitting rows by default.
    fn corners_in_fit(&self) -> bool {
        !matches!(self, Family::LinearRidge | Family::Gbm)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| Error::config("family", format!("unknown predictor family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CornerPolicy {
    /// GP-style models keep corners, linear and boosted trees drop them.
    FamilyDefault,
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub cv_folds: usize,
    pub corner_policy: CornerPolicy,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            cv_folds: 5,
            corner_policy: CornerPolicy::FamilyDefault,
            seed: 0,
        }
    }
}

impl FitOptions {
    fn keep_corners(&self, family: Family) -> bool {
        match self.corner_policy {
            CornerPolicy::FamilyDefault => family.corners_in_fit(),
            CornerPolicy::Include => true,
            CornerPolicy::Exclude => false,
        }
    }
}

/// Measurement records reshaped for fitting: one feature row and one target
/// value per kept record and domain.
pub(crate) struct FitData {
    pub features: Vec<Vec<f64>>,
    pub targets: BTreeMap<String, Vec<f64>>,
    pub lambdas: Vec<MixtureWeights>,
}

pub(crate) fn prepare(
    data: &MeasurementSet,
    spec: &FeatureSpec,
    caches: Option<&CacheSet>,
    keep_corners: bool,
) -> Result<FitData> {
    data.validate()?;
    spec.validate()?;
    let mut features = Vec::new();
    let mut lambdas = Vec::new();
    let mut targets: BTreeMap<String, Vec<f64>> = data
        .domain_ids()
        .into_iter()
        .map(|d| (d, Vec::new()))
        .collect();
    let mut corners_dropped = 0usize;
    for r in &data.records {
        if !keep_corners && r.lambda.is_corner() {
            corners_dropped += 1;
            continue;
        }
        features.push(build_features(&r.lambda, caches, spec)?);
        lambdas.push(r.lambda.clone());
        for (d, ys) in targets.iter_mut() {
            ys.push(r.losses.get(d)?);
        }
    }
    if features.is_empty() {
        return Err(Error::InsufficientData(
            "no measurement records left after dropping corners".into(),
        ));
    }
    if corners_dropped > 0 {
        log::debug!("dropped {corners_dropped} corner mixtures before fitting");
    }
    Ok(FitData {
        features,
        targets,
        lambdas,
    })
}

/// Row index → fold assignment: record i lands in fold i mod folds. With
/// fewer rows than folds this degrades to leave-one-out.
pub(crate) fn fold_of(row: usize, rows: usize, folds: usize) -> usize {
    row % folds.clamp(1, rows)
}

pub(crate) fn effective_folds(rows: usize, folds: usize) -> usize {
    folds.clamp(1, rows)
}

/// Per-feature affine map to zero mean and unit variance, fitted on
/// training rows only and reused verbatim at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub(crate) enum Model {
    EmpiricalMean {
        means: BTreeMap<String, f64>,
    },
    LinearRidge {
        scaler: Standardizer,
        per_domain: BTreeMap<String, linear::LinearModel>,
    },
    Gbm {
        per_domain: BTreeMap<String, gbm::GbmModel>,
    },
    Gp {
        scaler: Standardizer,
        hyper: GpHyper,
        x_train: Vec<Vec<f64>>,
        /// Lower-triangular Cholesky factor of the training kernel matrix.
        l_factor: Vec<Vec<f64>>,
        per_domain: BTreeMap<String, gp::GpDomain>,
    },
    Dml {
        per_domain: BTreeMap<String, DmlParams>,
    },
    Bimix {
        per_domain: BTreeMap<String, BimixParams>,
    },
    MdeDirect,
}

/// A fitted per-domain loss surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub feature_spec: FeatureSpec,
    pub target_domains: Vec<String>,
    /// Hash of the measurement artifact the fit consumed, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_hash: Option<String>,
    pub(crate) model: Model,
}

impl Predictor {
    pub fn family(&self) -> Family {
        match &self.model {
            Model::EmpiricalMean { .. } => Family::EmpiricalMean,
            Model::LinearRidge { .. } => Family::LinearRidge,
            Model::Gbm { .. } => Family::Gbm,
            Model::Gp { .. } => Family::Gp,
            Model::Dml { .. } => Family::Dml,
            Model::Bimix { .. } => Family::Bimix,
            Model::MdeDirect => Family::MdeDirect,
        }
    }

    /// Per-domain predicted losses at a mixture.
    pub fn predict(&self, lambda: &MixtureWeights, caches: Option<&CacheSet>) -> Result<LossVector> {
        Ok(self.predict_with_variance(lambda, caches)?.0)
    }

    /// Predictions plus, for GP models, the per-domain posterior variance.
    pub fn predict_with_variance(
        &self,
        lambda: &MixtureWeights,
        caches: Option<&CacheSet>,
    ) -> Result<(LossVector, Option<BTreeMap<String, f64>>)> {
        let mut out = LossVector::default();
        match &self.model {
            Model::EmpiricalMean { means } => {
                for (d, &m) in means {
                    out.insert(d.clone(), m);
                }
                Ok((out, None))
            }
            Model::LinearRidge { scaler, per_domain, .. } => {
                let x = scaler.transform(&build_features(lambda, caches, &self.feature_spec)?);
                for (d, m) in per_domain {
                    out.insert(d.clone(), m.predict(&x));
                }
                Ok((out, None))
            }
            Model::Gbm { per_domain } => {
                let x = build_features(lambda, caches, &self.feature_spec)?;
                for (d, m) in per_domain {
                    out.insert(d.clone(), m.predict(&x));
                }
                Ok((out, None))
            }
            Model::Gp {
                scaler,
                hyper,
                x_train,
                l_factor,
                per_domain,
            } => {
                let x = scaler.transform(&build_features(lambda, caches, &self.feature_spec)?);
                let (means, var) = gp::predict(hyper, x_train, l_factor, per_domain, &x);
                for (d, m) in means {
                    out.insert(d, m);
                }
                let variances = per_domain.keys().map(|d| (d.clone(), var)).collect();
                Ok((out, Some(variances)))
            }
            Model::Dml { per_domain } => {
                for (d, p) in per_domain {
                    out.insert(d.clone(), p.predict(lambda)?);
                }
                Ok((out, None))
            }
            Model::Bimix { per_domain } => {
                for (d, p) in per_domain {
                    out.insert(d.clone(), p.predict(lambda)?);
                }
                Ok((out, None))
            }
            Model::MdeDirect => {
                let caches = caches.ok_or_else(|| {
                    Error::config("caches", "direct ensemble prediction requires caches")
                })?;
                for d in &self.target_domains {
                    let cache = caches
                        .get(d)
                        .ok_or_else(|| Error::UnknownDomain(d.clone()))?;
                    out.insert(d.clone(), mde_domain_loss(cache, lambda)?);
                }
                Ok((out, None))
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("predictor serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, "predictor", e.to_string()))
    }
}

/// Predict with a fitted surrogate; thin wrapper over the method form.
pub fn predict(
    predictor: &Predictor,
    lambda: &MixtureWeights,
    caches: Option<&CacheSet>,
) -> Result<LossVector> {
    predictor.predict(lambda, caches)
}

pub use bimix::fit_bimix;
pub use dml::fit_dml;
pub use empirical::fit_empirical_mean;
pub use gbm::fit_gbm;
pub use gp::fit_gp;
pub use linear::fit_linear;

/// Standalone predictor that reports the ensemble loss estimate itself.
pub fn mde_direct(target_domains: Vec<String>) -> Predictor {
    Predictor {
        feature_spec: FeatureSpec::mde_only(target_domains.clone()),
        target_domains,
        training_hash: None,
        model: Model::MdeDirect,
    }
}

/// Fit any family through one entry point.
pub fn fit_predictor(
    family: Family,
    data: &MeasurementSet,
    spec: &FeatureSpec,
    caches: Option<&CacheSet>,
    opts: &FitOptions,
) -> Result<Predictor> {
    match family {
        Family::EmpiricalMean => fit_empirical_mean(data),
        Family::LinearRidge => fit_linear(data, spec, caches, opts),
        Family::Gbm => fit_gbm(data, spec, caches, opts),
        Family::Gp => fit_gp(data, spec, caches, opts),
        Family::Dml => fit_dml(data, opts),
        Family::Bimix => fit_bimix(data, opts),
        Family::MdeDirect => Ok(mde_direct(data.domain_ids())),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::experts::ProbCache;
    use crate::mde::mde_features;
    use crate::proxy::{MeasurementRecord, Provenance};

    /// Measurement set from explicit (weights, per-domain losses) rows.
    pub(crate) fn toy_set(rows: &[(Vec<f64>, Vec<(&str, f64)>)]) -> MeasurementSet {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (w, losses))| {
                let mut lv = LossVector::default();
                for (d, l) in losses {
                    lv.insert(*d, *l);
                }
                MeasurementRecord {
                    mixture_id: i,
                    lambda: MixtureWeights::new(w.clone()).unwrap(),
                    losses: lv,
                }
            })
            .collect();
        MeasurementSet {
            records,
            provenance: Provenance {
                order: 2,
                token_budget: 0,
                segment_len: 64,
                smoothing: crate::experts::Smoothing::default_for(2),
                master_seed: 0,
                mixtures_file: None,
            },
        }
    }

    pub(crate) fn toy_caches() -> CacheSet {
        let c1 = ProbCache {
            domain_id: "va".into(),
            expert_ids: vec!["a".into(), "b".into()],
            probs: vec![vec![0.5, 0.1], vec![0.4, 0.2]],
        };
        let c2 = ProbCache {
            domain_id: "vb".into(),
            expert_ids: vec!["a".into(), "b".into()],
            probs: vec![vec![0.1, 0.6], vec![0.3, 0.5], vec![0.2, 0.4]],
        };
        CacheSet::new(vec![c1, c2]).unwrap()
    }

    #[test]
    fn feature_vector_layout() {
        let caches = toy_caches();
        let lambda = MixtureWeights::new(vec![0.3, 0.7]).unwrap();
        let subset = vec!["va".to_string(), "vb".to_string()];

        let lam = build_features(&lambda, None, &FeatureSpec::lambda_only()).unwrap();
        assert_eq!(lam, vec![0.3, 0.7]);

        let both = build_features(&lambda, Some(&caches), &FeatureSpec::lambda_mde(subset.clone())).unwrap();
        assert_eq!(both.len(), 4);
        assert_eq!(&both[..2], &[0.3, 0.7]);

        let mde = build_features(&lambda, Some(&caches), &FeatureSpec::mde_only(subset)).unwrap();
        assert_eq!(&both[2..], &mde[..]);
        let direct = mde_features(&caches, &lambda).unwrap();
        assert_eq!(mde, direct);
    }

    #[test]
    fn one_hot_mde_features_are_expert_losses() {
        let caches = toy_caches();
        let spec = FeatureSpec::mde_only(vec!["va".into(), "vb".into()]);
        let f = build_features(&MixtureWeights::one_hot(2, 1), Some(&caches), &spec).unwrap();
        // Column 1 of va is (0.1, 0.2); of vb is (0.6, 0.5, 0.4).
        let expect_va = -((0.1f64.ln() + 0.2f64.ln()) / 2.0);
        let expect_vb = -((0.6f64.ln() + 0.5f64.ln() + 0.4f64.ln()) / 3.0);
        assert_eq!(f[0].to_bits(), expect_va.to_bits());
        assert_eq!(f[1].to_bits(), expect_vb.to_bits());
    }

    #[test]
    fn mde_features_require_caches() {
        let spec = FeatureSpec::mde_only(vec!["va".into()]);
        let lambda = MixtureWeights::uniform(2);
        assert!(build_features(&lambda, None, &spec).is_err());
        let empty = FeatureSpec::mde_only(vec![]);
        assert!(build_features(&lambda, None, &empty).is_err());
    }

    #[test]
    fn mde_direct_matches_module_output() {
        let caches = toy_caches();
        let p = mde_direct(vec!["va".into(), "vb".into()]);
        let lambda = MixtureWeights::new(vec![0.25, 0.75]).unwrap();
        let pred = p.predict(&lambda, Some(&caches)).unwrap();
        let direct = mde_features(&caches, &lambda).unwrap();
        assert_eq!(pred.get("va").unwrap().to_bits(), direct[0].to_bits());
        assert_eq!(pred.get("vb").unwrap().to_bits(), direct[1].to_bits());
    }
}
