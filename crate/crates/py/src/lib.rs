//! Python bindings: expert training, probability caches, ensemble losses,
//! surrogate fitting, simplex search, and the finite-instance identity check.

use std::collections::BTreeMap;

use mixopt_core::corpus::{DomainCorpus, DomainGroup, ValidationDomain};
use mixopt_core::eval::{pairwise_ranking_accuracy, spearman};
use mixopt_core::experts::{build_prob_cache, train_expert, NgramExpert};
use mixopt_core::optimizer::{optimize, OptimizeConfig};
use mixopt_core::oracle::verify_random_instances;
use mixopt_core::proxy::{MeasurementRecord, Provenance};
use mixopt_core::regression::{
    fit_predictor, predict, Family, FeatureMode, FeatureSpec, FitOptions, Predictor,
};
use mixopt_core::{
    mde_domain_loss, Aggregator, CacheSet, Error, LossVector, MeasurementSet, MixtureWeights,
    ProbCache, ProxyConfig, Smoothing,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn pyerr(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kebab<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {value:?}")))
}

fn weights(values: Vec<f64>) -> PyResult<MixtureWeights> {
    MixtureWeights::new(values).map_err(pyerr)
}

/// Smoothed n-gram model trained on one domain's tokens.
#[pyclass(frozen)]
pub struct Expert {
    inner: NgramExpert,
}

#[pymethods]
impl Expert {
    #[staticmethod]
    #[pyo3(signature = (tokens, vocab_size, order=2, delta=0.5, name="expert"))]
    fn train(
        tokens: Vec<u32>,
        vocab_size: u32,
        order: usize,
        delta: f64,
        name: &str,
    ) -> PyResult<Self> {
        let corpus = DomainCorpus::new(name, tokens, vocab_size).map_err(pyerr)?;
        let expert =
            train_expert(&corpus, order, &Smoothing::uniform(order, delta)).map_err(pyerr)?;
        Ok(Self { inner: expert })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.domain_id
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.inner.vocab_size
    }
}

/// Per-token probabilities of every expert on one held-out token stream.
#[pyclass(frozen)]
pub struct Cache {
    inner: ProbCache,
}

#[pymethods]
impl Cache {
    #[staticmethod]
    fn build(experts: Vec<PyRef<Expert>>, tokens: Vec<u32>, domain_id: &str) -> PyResult<Self> {
        let experts: Vec<NgramExpert> = experts.iter().map(|e| e.inner.clone()).collect();
        let domain =
            ValidationDomain::new(domain_id, tokens, DomainGroup::SpLike).map_err(pyerr)?;
        let cache = build_prob_cache(&experts, &domain).map_err(pyerr)?;
        Ok(Self { inner: cache })
    }

    /// Cache from explicit probabilities; `probs[j][i]` is expert i's
    /// probability of token j.
    #[staticmethod]
    fn from_probs(
        domain_id: &str,
        expert_ids: Vec<String>,
        probs: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let cache = ProbCache {
            domain_id: domain_id.to_string(),
            expert_ids,
            probs,
        };
        cache.validate().map_err(pyerr)?;
        Ok(Self { inner: cache })
    }

    /// Mean negative log of the λ-mixed expert probabilities.
    fn ensemble_loss(&self, lambda: Vec<f64>) -> PyResult<f64> {
        mde_domain_loss(&self.inner, &weights(lambda)?).map_err(pyerr)
    }

    #[getter]
    fn domain_id(&self) -> &str {
        &self.inner.domain_id
    }

    #[getter]
    fn expert_ids(&self) -> Vec<String> {
        self.inner.expert_ids.clone()
    }

    #[getter]
    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }
}

/// A fitted mapping from mixture weights to per-domain losses.
#[pyclass(frozen)]
pub struct Model {
    predictor: Predictor,
    caches: Option<CacheSet>,
    num_components: usize,
}

#[pymethods]
impl Model {
    fn predict(&self, lambda: Vec<f64>) -> PyResult<BTreeMap<String, f64>> {
        let out = predict(&self.predictor, &weights(lambda)?, self.caches.as_ref())
            .map_err(pyerr)?;
        Ok(out.per_domain)
    }

    #[getter]
    fn family(&self) -> String {
        serde_json::to_value(self.predictor.family())
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    #[getter]
    fn feature_mode(&self) -> &'static str {
        self.predictor.feature_spec.mode_name()
    }

    #[getter]
    fn target_domains(&self) -> Vec<String> {
        self.predictor.target_domains.clone()
    }
}

/// Outcome of a simplex search.
#[pyclass(frozen, get_all)]
pub struct SearchResult {
    pub best: Vec<f64>,
    pub smoothed: Option<Vec<f64>>,
    pub score: f64,
    pub evaluations: usize,
    pub skipped: usize,
}

/// Result of the random-instance identity sweep.
#[pyclass(frozen, get_all)]
pub struct IdentityReport {
    pub passed: bool,
    pub max_abs_diff: f64,
    pub instances: u64,
    pub failed_instances: Vec<u64>,
}

/// Fit a loss predictor on measured mixtures. `lambdas[i]` and `losses[i]`
/// describe one mixture: its weights and its per-domain losses.
#[pyfunction]
#[pyo3(signature = (family, lambdas, losses, features="lambda-only", caches=None, mde_subset=None, cv_folds=5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn fit(
    family: &str,
    lambdas: Vec<Vec<f64>>,
    losses: Vec<BTreeMap<String, f64>>,
    features: &str,
    caches: Option<Vec<PyRef<Cache>>>,
    mde_subset: Option<Vec<String>>,
    cv_folds: usize,
    seed: u64,
) -> PyResult<Model> {
    if lambdas.len() != losses.len() {
        return Err(PyValueError::new_err(format!(
            "{} weight vectors vs {} loss rows",
            lambdas.len(),
            losses.len()
        )));
    }
    let num_components = lambdas
        .first()
        .map(Vec::len)
        .ok_or_else(|| PyValueError::new_err("no training mixtures"))?;
    let family: Family = parse_kebab("family", family)?;
    let mode: FeatureMode = parse_kebab("feature mode", features)?;
    let cache_set = match &caches {
        Some(list) => Some(
            CacheSet::new(list.iter().map(|c| c.inner.clone()).collect()).map_err(pyerr)?,
        ),
        None => None,
    };
    let subset = match mode {
        FeatureMode::LambdaOnly => Vec::new(),
        _ => mde_subset.unwrap_or_else(|| {
            cache_set
                .as_ref()
                .map(|cs| cs.caches().iter().map(|c| c.domain_id.clone()).collect())
                .unwrap_or_default()
        }),
    };
    let spec = FeatureSpec {
        mode,
        mde_domain_subset: subset,
    };
    let records: Vec<MeasurementRecord> = lambdas
        .into_iter()
        .zip(losses)
        .enumerate()
        .map(|(i, (lambda, per_domain))| {
            Ok(MeasurementRecord {
                mixture_id: i,
                lambda: weights(lambda)?,
                losses: LossVector::new(per_domain).map_err(pyerr)?,
            })
        })
        .collect::<PyResult<_>>()?;
    let data = MeasurementSet {
        records,
        provenance: Provenance::from_config(&ProxyConfig::new(1, 0, 0)),
    };
    let opts = FitOptions {
        cv_folds,
        seed,
        ..FitOptions::default()
    };
    let predictor =
        fit_predictor(family, &data, &spec, cache_set.as_ref(), &opts).map_err(pyerr)?;
    Ok(Model {
        predictor,
        caches: cache_set,
        num_components,
    })
}

/// Search the simplex for the mixture minimizing the model's average
/// predicted loss over `aggregate` (defaults to every target domain).
#[pyfunction(name = "optimize")]
#[pyo3(signature = (model, aggregate=None, n_random=4096, n_refine_iters=200, step_init=0.1, tol=1e-6, seed=0, smoothing=false))]
#[allow(clippy::too_many_arguments)]
fn optimize_model(
    model: &Model,
    aggregate: Option<Vec<String>>,
    n_random: usize,
    n_refine_iters: usize,
    step_init: f64,
    tol: f64,
    seed: u64,
    smoothing: bool,
) -> PyResult<SearchResult> {
    let group = aggregate.unwrap_or_else(|| model.predictor.target_domains.clone());
    let aggregator = Aggregator::AvgGroup { group };
    let cfg = OptimizeConfig {
        n_random,
        n_refine_iters,
        step_init,
        tol,
        seed,
        smoothing,
    };
    let report = optimize(
        &model.predictor,
        &aggregator,
        model.caches.as_ref(),
        model.num_components,
        &cfg,
    )
    .map_err(pyerr)?;
    Ok(SearchResult {
        best: report.best.as_slice().to_vec(),
        smoothed: report.smoothed.as_ref().map(|s| s.as_slice().to_vec()),
        score: report.score,
        evaluations: report.evaluations,
        skipped: report.skipped,
    })
}

/// 0.99·λ + 0.01·uniform, keeping every domain's weight positive.
#[pyfunction]
fn smooth_mixture(lambda: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(mixopt_core::smooth_mixture(&weights(lambda)?)
        .as_slice()
        .to_vec())
}

/// Rank correlation with mean ranks over ties.
#[pyfunction(name = "spearman")]
fn spearman_py(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    spearman(&pred, &truth).map_err(pyerr)
}

/// Fraction of mixture pairs ordered the same way by prediction and truth.
#[pyfunction]
fn pairwise_accuracy(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    pairwise_ranking_accuracy(&pred, &truth).map_err(pyerr)
}

/// Per-domain ensemble losses for one mixture across several caches.
#[pyfunction]
fn ensemble_loss_vector(
    caches: Vec<PyRef<Cache>>,
    lambda: Vec<f64>,
) -> PyResult<BTreeMap<String, f64>> {
    let lambda = weights(lambda)?;
    caches
        .iter()
        .map(|c| {
            let loss = mde_domain_loss(&c.inner, &lambda).map_err(pyerr)?;
            Ok((c.inner.domain_id.clone(), loss))
        })
        .collect()
}

/// Check the reweighted-expert identity on seeded random finite instances.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=1000, k_max=4, x_max=5, y_max=6, tol=1e-12))]
fn verify_identity(
    seed: u64,
    instances: u64,
    k_max: usize,
    x_max: usize,
    y_max: usize,
    tol: f64,
) -> PyResult<IdentityReport> {
    let report =
        verify_random_instances(seed, instances, k_max, x_max, y_max, tol).map_err(pyerr)?;
    Ok(IdentityReport {
        passed: report.pass,
        max_abs_diff: report.max_abs_diff,
        instances: report.instances,
        failed_instances: report.failed_instances,
    })
}

#[pymodule]
fn mixopt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Expert>()?;
    m.add_class::<Cache>()?;
    m.add_class::<Model>()?;
    m.add_class::<SearchResult>()?;
    m.add_class::<IdentityReport>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_model, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_py, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_loss_vector, m)?)?;
    m.add_function(wrap_pyfunction!(verify_identity, m)?)?;
    Ok(())
}
