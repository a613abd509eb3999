//! Run configuration: one JSON file drives every pipeline stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixopt_core::corpus::DomainGroup;
use mixopt_core::regression::{CornerPolicy, Family, FeatureMode, FeatureSpec};
use mixopt_core::{Aggregator, Error, Smoothing};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Result<T> = std::result::Result<T, Error>;

/// Tokens generated from a saved transition-table spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub spec: PathBuf,
    pub tokens: usize,
    /// Overrides the seed stored in the transition-table file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A training domain, read from a token file or generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
}

/// A held-out domain on which losses are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationEntry {
    pub id: String,
    pub group: DomainGroup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
}

fn check_source(
    id: &str,
    section: &str,
    path: &Option<PathBuf>,
    synthetic: &Option<SyntheticSource>,
) -> Result<()> {
    match (path, synthetic) {
        (Some(_), Some(_)) => Err(Error::config(
            format!("{section}.{id}"),
            "set either path or synthetic, not both",
        )),
        (None, None) => Err(Error::config(
            format!("{section}.{id}"),
            "needs a path or a synthetic source",
        )),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub order: usize,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

impl Default for ExpertSection {
    fn default() -> Self {
        Self {
            order: 2,
            delta: 0.5,
            beta: None,
        }
    }
}

impl ExpertSection {
    pub fn smoothing(&self) -> Result<Smoothing> {
        let s = match &self.beta {
            Some(beta) => Smoothing {
                delta: self.delta,
                beta: beta.clone(),
            },
            None => Smoothing::uniform(self.order, self.delta),
        };
        s.validate(self.order)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Total number of training mixtures, expert corners included.
    pub n_mixtures: usize,
    pub include_corners: bool,
    pub uniform_weight: f64,
    pub scale_range: (f64, f64),
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            n_mixtures: 25,
            include_corners: true,
            uniform_weight: 0.5,
            scale_range: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxySection {
    pub order: usize,
    pub token_budget: usize,
    pub segment_len: usize,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

impl Default for ProxySection {
    fn default() -> Self {
        Self {
            order: 2,
            token_budget: 200_000,
            segment_len: 64,
            delta: 0.5,
            beta: None,
        }
    }
}

impl ProxySection {
    pub fn smoothing(&self) -> Result<Smoothing> {
        let s = match &self.beta {
            Some(beta) => Smoothing {
                delta: self.delta,
                beta: beta.clone(),
            },
            None => Smoothing::uniform(self.order, self.delta),
        };
        s.validate(self.order)?;
        Ok(s)
    }
}

/// One surrogate model to fit and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyEntry {
    pub family: Family,
    pub features: FeatureMode,
    /// Validation domains whose ensemble losses become features.
    /// Defaults to every validation domain, sorted by id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mde_subset: Option<Vec<String>>,
}

impl FamilyEntry {
    pub fn feature_spec(&self, all_validation_ids: &[String]) -> FeatureSpec {
        let subset = match self.features {
            FeatureMode::LambdaOnly => Vec::new(),
            _ => self
                .mde_subset
                .clone()
                .unwrap_or_else(|| all_validation_ids.to_vec()),
        };
        FeatureSpec {
            mode: self.features,
            mde_domain_subset: subset,
        }
    }

    pub fn needs_caches(&self) -> bool {
        self.features != FeatureMode::LambdaOnly
    }
}

fn default_families() -> Vec<FamilyEntry> {
    let pick = [
        (Family::EmpiricalMean, FeatureMode::LambdaOnly),
        (Family::LinearRidge, FeatureMode::LambdaOnly),
        (Family::LinearRidge, FeatureMode::LambdaMde),
        (Family::Gp, FeatureMode::LambdaMde),
        (Family::MdeDirect, FeatureMode::MdeOnly),
    ];
    pick.into_iter()
        .map(|(family, features)| FamilyEntry {
            family,
            features,
            mde_subset: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSection {
    pub families: Vec<FamilyEntry>,
    pub cv_folds: usize,
    pub corner_policy: CornerPolicy,
}

impl Default for RegressionSection {
    fn default() -> Self {
        Self {
            families: default_families(),
            cv_folds: 5,
            corner_policy: CornerPolicy::FamilyDefault,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_repeats: usize,
    /// Records per training split. Defaults to two thirds of the set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    /// Named loss aggregates. "avg-all" over every validation domain is
    /// always available without being listed here.
    pub aggregators: BTreeMap<String, Aggregator>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_repeats: 5,
            train_size: None,
            aggregators: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub family: Family,
    pub features: FeatureMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mde_subset: Option<Vec<String>>,
    /// Name of the aggregate to minimize.
    pub aggregator: String,
    pub n_random: usize,
    pub n_refine_iters: usize,
    pub step_init: f64,
    pub tol: f64,
    pub smoothing: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            family: Family::Gp,
            features: FeatureMode::LambdaMde,
            mde_subset: None,
            aggregator: "avg-all".to_string(),
            n_random: 4096,
            n_refine_iters: 200,
            step_init: 0.1,
            tol: 1e-6,
            smoothing: false,
        }
    }
}

impl OptimizerSection {
    pub fn family_entry(&self) -> FamilyEntry {
        FamilyEntry {
            family: self.family,
            features: self.features,
            mde_subset: self.mde_subset.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Section {
    pub instances: u64,
    pub k_max: usize,
    pub x_max: usize,
    pub y_max: usize,
    pub tol: f64,
}

impl Default for Prop1Section {
    fn default() -> Self {
        Self {
            instances: 1000,
            k_max: 4,
            x_max: 5,
            y_max: 6,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory receiving every artifact this run produces.
    pub workspace: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub vocab_size: u32,
    pub domains: Vec<DomainEntry>,
    #[serde(default)]
    pub validation: Vec<ValidationEntry>,
    #[serde(default)]
    pub expert: ExpertSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub proxy: ProxySection,
    #[serde(default)]
    pub regression: RegressionSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub prop1: Prop1Section,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, "run config", e.to_string()))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.domains.sort_by(|a, b| a.id.cmp(&b.id));
        cfg.validation.sort_by(|a, b| a.id.cmp(&b.id));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.workspace);
        for d in &mut self.domains {
            if let Some(p) = &mut d.path {
                resolve(p);
            }
            if let Some(s) = &mut d.synthetic {
                resolve(&mut s.spec);
            }
        }
        for v in &mut self.validation {
            if let Some(p) = &mut v.path {
                resolve(p);
            }
            if let Some(s) = &mut v.synthetic {
                resolve(&mut s.spec);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("domains", "at least one training domain"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        for w in self.domains.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::config("domains", format!("duplicate id {}", w[0].id)));
            }
        }
        for w in self.validation.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::config(
                    "validation",
                    format!("duplicate id {}", w[0].id),
                ));
            }
        }
        for d in &self.domains {
            check_source(&d.id, "domains", &d.path, &d.synthetic)?;
        }
        for v in &self.validation {
            check_source(&v.id, "validation", &v.path, &v.synthetic)?;
        }
        self.expert.smoothing()?;
        self.proxy.smoothing()?;
        if self.sampler.include_corners && self.sampler.n_mixtures <= self.domains.len() {
            return Err(Error::config(
                "sampler.n_mixtures",
                "must exceed the domain count when corners are included",
            ));
        }
        if self.regression.families.is_empty() {
            return Err(Error::config("regression.families", "must not be empty"));
        }
        let val_ids = self.validation_ids();
        for entry in &self.regression.families {
            if let Some(subset) = &entry.mde_subset {
                for id in subset {
                    if !val_ids.contains(id) {
                        return Err(Error::config(
                            "regression.families.mde_subset",
                            format!("unknown validation domain {id}"),
                        ));
                    }
                }
            }
        }
        for (name, agg) in &self.eval.aggregators {
            agg.validate()?;
            for id in agg.referenced_domains() {
                if !val_ids.iter().any(|v| v == id) {
                    return Err(Error::config(
                        format!("eval.aggregators.{name}"),
                        format!("unknown validation domain {id}"),
                    ));
                }
            }
        }
        if self.optimizer.aggregator != "avg-all"
            && !self.eval.aggregators.contains_key(&self.optimizer.aggregator)
        {
            return Err(Error::config(
                "optimizer.aggregator",
                format!("no aggregator named {}", self.optimizer.aggregator),
            ));
        }
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.id.clone()).collect()
    }

    pub fn validation_ids(&self) -> Vec<String> {
        self.validation.iter().map(|v| v.id.clone()).collect()
    }

    /// Every named aggregate, with "avg-all" over all validation domains
    /// filled in unless the config shadows it.
    pub fn aggregators(&self) -> Vec<(String, Aggregator)> {
        let mut map = self.eval.aggregators.clone();
        map.entry("avg-all".to_string()).or_insert(Aggregator::AvgGroup {
            group: self.validation_ids(),
        });
        map.into_iter().collect()
    }

    /// Fingerprint of the run settings, stamped into stage manifests so a
    /// later stage refuses artifacts produced under a different config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "workspace": "ws",
            "vocab_size": 8,
            "domains": [
                {"id": "b", "path": "b.txt"},
                {"id": "a", "path": "a.txt"}
            ],
            "validation": [
                {"id": "v", "group": "sp-like", "path": "v.txt"}
            ]
        })
    }

    fn load_value(v: serde_json::Value) -> Result<RunConfig> {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        let dir = std::env::temp_dir().join(format!("mixopt-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("config-{}.json", NEXT.fetch_add(1, Ordering::Relaxed)));
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        RunConfig::load(&path, None)
    }

    #[test]
    fn defaults_fill_in_and_domains_sort_by_id() {
        let cfg = load_value(minimal_json()).unwrap();
        assert_eq!(cfg.domain_ids(), vec!["a", "b"]);
        assert_eq!(cfg.sampler.n_mixtures, 25);
        assert_eq!(cfg.eval.n_repeats, 5);
        assert_eq!(cfg.optimizer.aggregator, "avg-all");
        assert!(cfg.workspace.is_absolute());
        let aggs = cfg.aggregators();
        assert_eq!(aggs.len(), 1);
        assert_eq!(aggs[0].0, "avg-all");
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = load_value(minimal_json()).unwrap();
        let mut b = a.clone();
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = minimal_json();
        v["surprise"] = serde_json::json!(1);
        assert!(load_value(v).is_err());
    }

    #[test]
    fn domain_needs_exactly_one_source() {
        let mut v = minimal_json();
        v["domains"][0]["synthetic"] = serde_json::json!({"spec": "s.json", "tokens": 10});
        assert!(load_value(v).is_err());
        let mut v = minimal_json();
        v["domains"][0] = serde_json::json!({"id": "b"});
        assert!(load_value(v).is_err());
    }

    #[test]
    fn optimizer_aggregator_must_exist() {
        let mut v = minimal_json();
        v["optimizer"] = serde_json::json!({"aggregator": "missing"});
        assert!(load_value(v).is_err());
    }
}
