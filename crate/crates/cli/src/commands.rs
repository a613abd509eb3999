//! One function per pipeline stage. Every stage writes a manifest recording
//! the config fingerprint and the hashes of what it read and wrote, and
//! refuses stale upstream artifacts unless forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixopt_core::corpus::{
    generate_synthetic_domain, load_domain, DomainCorpus, SyntheticDomainSpec, ValidationDomain,
};
use mixopt_core::eval::{render_table, run_splits, SplitPlan};
use mixopt_core::experts::{
    build_prob_cache, cache_manifest_path, load_expert, load_prob_cache, save_expert,
    train_expert, write_prob_cache,
};
use mixopt_core::mixtures::{include_expert_corners, load_mixtures, write_mixtures};
use mixopt_core::optimizer::{optimize, OptimizeConfig, OptimizeReport};
use mixopt_core::oracle::verify_random_instances;
use mixopt_core::proxy::{
    build_measurement_set, load_measurements, measurements_manifest_path, write_measurements,
    ProxyConfig,
};
use mixopt_core::regression::{fit_predictor, Family, FeatureMode, FeatureSpec, FitOptions};
use mixopt_core::rng::derive_seed;
use mixopt_core::{
    sample_mixtures, Aggregator, CacheSet, Error, MixtureSamplerConfig, ProbCache,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Result, RunConfig, SyntheticSource};

/// Artifact layout inside the run's workspace directory.
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn ensure(&self, rel: &str) -> Result<()> {
        let dir = self.join(rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.join(&format!("manifests/{stage}.json"))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// What a stage consumed and produced, keyed by workspace-relative path
/// (inputs outside the workspace are keyed by a `source:` label).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    fn write(&self, ws: &Workspace) -> Result<()> {
        ws.ensure("manifests")?;
        write_json(self, &ws.manifest_path(&self.stage))
    }

    pub fn load(ws: &Workspace, stage: &str) -> Result<Self> {
        let path = ws.manifest_path(stage);
        if !path.exists() {
            return Err(Error::ArtifactMismatch(format!(
                "stage {stage} has not run in this workspace"
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, "stage manifest", e.to_string()))
    }
}

fn finish_stage(
    ws: &Workspace,
    stage: &str,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
) -> Result<()> {
    StageManifest {
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        inputs,
        outputs,
    }
    .write(ws)
}

/// Refuse to build on a stage that ran under a different config or whose
/// outputs were modified afterwards.
fn require_stage(ws: &Workspace, stage: &str, cfg: &RunConfig, force: bool) -> Result<()> {
    let manifest = match StageManifest::load(ws, stage) {
        Ok(m) => m,
        Err(e) if force => {
            log::warn!("--force: proceeding without a usable {stage} manifest ({e})");
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    if force {
        log::warn!("--force: skipping artifact checks against stage {stage}");
        return Ok(());
    }
    if manifest.config_hash != cfg.hash() {
        return Err(Error::ArtifactMismatch(format!(
            "stage {stage} ran under a different config"
        )));
    }
    for (rel, recorded) in &manifest.outputs {
        if file_sha256(&ws.join(rel))? != *recorded {
            return Err(Error::ArtifactMismatch(format!(
                "{rel} changed after stage {stage} wrote it"
            )));
        }
    }
    Ok(())
}

fn materialize(
    id: &str,
    path: &Option<PathBuf>,
    synthetic: &Option<SyntheticSource>,
    vocab_size: u32,
) -> Result<DomainCorpus> {
    if let Some(p) = path {
        let mut corpus = load_domain(p, vocab_size)?;
        corpus.id = id.to_string();
        return Ok(corpus);
    }
    let src = synthetic.as_ref().expect("config validated: one source set");
    let mut spec = SyntheticDomainSpec::load(&src.spec)?;
    if let Some(seed) = src.seed {
        spec.seed = seed;
    }
    if spec.vocab_size != vocab_size {
        return Err(Error::config(
            format!("domains.{id}"),
            format!(
                "spec vocab {} does not match run vocab {vocab_size}",
                spec.vocab_size
            ),
        ));
    }
    generate_synthetic_domain(id, &spec, src.tokens)
}

fn training_domains(cfg: &RunConfig) -> Result<Vec<DomainCorpus>> {
    cfg.domains
        .iter()
        .map(|d| materialize(&d.id, &d.path, &d.synthetic, cfg.vocab_size))
        .collect()
}

fn validation_domains(cfg: &RunConfig) -> Result<Vec<ValidationDomain>> {
    cfg.validation
        .iter()
        .map(|v| {
            let corpus = materialize(&v.id, &v.path, &v.synthetic, cfg.vocab_size)?;
            Ok(ValidationDomain::from_corpus(&corpus, v.group))
        })
        .collect()
}

fn source_hashes(cfg: &RunConfig, validation: bool) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    if validation {
        for v in &cfg.validation {
            let file = v.path.as_ref().or(v.synthetic.as_ref().map(|s| &s.spec));
            if let Some(file) = file {
                inputs.insert(format!("source:validation/{}", v.id), file_sha256(file)?);
            }
        }
    } else {
        for d in &cfg.domains {
            let file = d.path.as_ref().or(d.synthetic.as_ref().map(|s| &s.spec));
            if let Some(file) = file {
                inputs.insert(format!("source:domain/{}", d.id), file_sha256(file)?);
            }
        }
    }
    Ok(inputs)
}

fn expert_rel(id: &str) -> String {
    format!("experts/{id}.json")
}

fn cache_rel(id: &str) -> String {
    format!("caches/{id}.csv")
}

pub fn cmd_train_experts(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    ws.ensure("experts")?;
    let smoothing = cfg.expert.smoothing()?;
    let mut outputs = BTreeMap::new();
    for corpus in &training_domains(cfg)? {
        let expert = train_expert(corpus, cfg.expert.order, &smoothing)?;
        let rel = expert_rel(&corpus.id);
        let path = ws.join(&rel);
        save_expert(&expert, &path)?;
        outputs.insert(rel.clone(), file_sha256(&path)?);
        log::info!("trained expert {} on {} tokens", corpus.id, corpus.tokens.len());
    }
    finish_stage(&ws, "train-experts", cfg, source_hashes(cfg, false)?, outputs)
}

pub fn cmd_build_caches(cfg: &RunConfig, force: bool) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    require_stage(&ws, "train-experts", cfg, force)?;
    ws.ensure("caches")?;
    let experts: Vec<_> = cfg
        .domains
        .iter()
        .map(|d| load_expert(ws.join(&expert_rel(&d.id))))
        .collect::<Result<_>>()?;
    let smoothing = cfg.expert.smoothing()?;
    let mut inputs = source_hashes(cfg, true)?;
    for d in &cfg.domains {
        let rel = expert_rel(&d.id);
        let hash = file_sha256(&ws.join(&rel))?;
        inputs.insert(rel, hash);
    }
    let mut outputs = BTreeMap::new();
    for domain in &validation_domains(cfg)? {
        let cache = build_prob_cache(&experts, domain)?;
        let rel = cache_rel(&domain.id);
        let path = ws.join(&rel);
        write_prob_cache(&cache, cfg.expert.order, &smoothing, &path)?;
        let sidecar = cache_manifest_path(&path);
        let sidecar_rel = format!(
            "caches/{}",
            sidecar.file_name().unwrap().to_string_lossy()
        );
        outputs.insert(rel, file_sha256(&path)?);
        outputs.insert(sidecar_rel, file_sha256(&sidecar)?);
        log::info!("cached {} tokens for {}", domain.tokens.len(), domain.id);
    }
    finish_stage(&ws, "build-caches", cfg, inputs, outputs)
}

pub fn cmd_sample_mixtures(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    let domains = training_domains(cfg)?;
    let k = domains.len();
    let total: usize = domains.iter().map(|d| d.tokens.len()).sum();
    let freqs: Vec<f64> = domains
        .iter()
        .map(|d| d.tokens.len() as f64 / total as f64)
        .collect();
    let mut sampler =
        MixtureSamplerConfig::with_defaults(k, freqs, derive_seed(cfg.seed, "mixtures"));
    sampler.uniform_weight = cfg.sampler.uniform_weight;
    sampler.scale_range = cfg.sampler.scale_range;
    let mixtures = if cfg.sampler.include_corners {
        let drawn = sample_mixtures(&sampler, cfg.sampler.n_mixtures - k)?;
        include_expert_corners(&drawn, k)
    } else {
        sample_mixtures(&sampler, cfg.sampler.n_mixtures)?
    };
    let path = ws.join("mixtures.csv");
    write_mixtures(&mixtures, &path)?;
    let outputs = BTreeMap::from([("mixtures.csv".to_string(), file_sha256(&path)?)]);
    finish_stage(&ws, "sample-mixtures", cfg, source_hashes(cfg, false)?, outputs)
}

pub fn cmd_measure(cfg: &RunConfig, force: bool) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    require_stage(&ws, "sample-mixtures", cfg, force)?;
    let mixtures = load_mixtures(ws.join("mixtures.csv"))?;
    let domains = training_domains(cfg)?;
    let val_domains = validation_domains(cfg)?;
    let proxy_cfg = ProxyConfig {
        order: cfg.proxy.order,
        token_budget: cfg.proxy.token_budget,
        smoothing: cfg.proxy.smoothing()?,
        segment_len: cfg.proxy.segment_len,
        master_seed: derive_seed(cfg.seed, "proxy"),
    };
    let mut set = build_measurement_set(&domains, &val_domains, &mixtures, &proxy_cfg)?;
    set.provenance.mixtures_file = Some("mixtures.csv".to_string());
    let path = ws.join("measurements.csv");
    write_measurements(&set, &path)?;
    let sidecar = measurements_manifest_path(&path);
    let mut inputs = source_hashes(cfg, false)?;
    inputs.extend(source_hashes(cfg, true)?);
    inputs.insert(
        "mixtures.csv".to_string(),
        file_sha256(&ws.join("mixtures.csv"))?,
    );
    let outputs = BTreeMap::from([
        ("measurements.csv".to_string(), file_sha256(&path)?),
        (
            format!("{}", sidecar.file_name().unwrap().to_string_lossy()),
            file_sha256(&sidecar)?,
        ),
    ]);
    log::info!("measured {} mixtures", set.records.len());
    finish_stage(&ws, "measure", cfg, inputs, outputs)
}

fn load_cache_set(ws: &Workspace, cfg: &RunConfig) -> Result<CacheSet> {
    let caches: Vec<ProbCache> = cfg
        .validation
        .iter()
        .map(|v| {
            let (cache, _) = load_prob_cache(ws.join(&cache_rel(&v.id)))?;
            Ok(cache)
        })
        .collect::<Result<_>>()?;
    CacheSet::new(caches)
}

fn load_measured(ws: &Workspace) -> Result<mixopt_core::MeasurementSet> {
    let mixtures = load_mixtures(ws.join("mixtures.csv"))?;
    load_measurements(ws.join("measurements.csv"), &mixtures)
}

pub fn cmd_fit_eval(cfg: &RunConfig, force: bool) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    require_stage(&ws, "sample-mixtures", cfg, force)?;
    require_stage(&ws, "measure", cfg, force)?;
    let needs_caches = cfg.regression.families.iter().any(|f| f.needs_caches());
    let caches = if needs_caches {
        require_stage(&ws, "build-caches", cfg, force)?;
        Some(load_cache_set(&ws, cfg)?)
    } else {
        None
    };
    let data = load_measured(&ws)?;
    let val_ids = cfg.validation_ids();
    let families: Vec<(Family, FeatureSpec)> = cfg
        .regression
        .families
        .iter()
        .map(|f| (f.family, f.feature_spec(&val_ids)))
        .collect();
    let plan = SplitPlan {
        n_repeats: cfg.eval.n_repeats,
        train_size: cfg
            .eval
            .train_size
            .unwrap_or(data.records.len() * 2 / 3),
        seed: derive_seed(cfg.seed, "eval"),
    };
    let opts = FitOptions {
        cv_folds: cfg.regression.cv_folds,
        corner_policy: cfg.regression.corner_policy,
        seed: derive_seed(cfg.seed, "fit"),
    };
    let aggregators = cfg.aggregators();
    let reports = run_splits(&data, &families, &plan, caches.as_ref(), &aggregators, &opts)?;
    ws.ensure("reports")?;
    let json_path = ws.join("reports/eval.json");
    write_json(&reports, &json_path)?;
    let table = render_table(&reports);
    let txt_path = ws.join("reports/eval.txt");
    std::fs::write(&txt_path, &table).map_err(|e| Error::io(&txt_path, e))?;
    print!("{table}");
    let mut inputs = BTreeMap::from([(
        "measurements.csv".to_string(),
        file_sha256(&ws.join("measurements.csv"))?,
    )]);
    if needs_caches {
        for v in &cfg.validation {
            let rel = cache_rel(&v.id);
            let hash = file_sha256(&ws.join(&rel))?;
            inputs.insert(rel, hash);
        }
    }
    let outputs = BTreeMap::from([
        ("reports/eval.json".to_string(), file_sha256(&json_path)?),
        ("reports/eval.txt".to_string(), file_sha256(&txt_path)?),
    ]);
    finish_stage(&ws, "fit-eval", cfg, inputs, outputs)
}

/// What the simplex search settled on, alongside the settings that drove it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeOutput {
    pub family: Family,
    pub features: FeatureMode,
    pub aggregator: String,
    #[serde(flatten)]
    pub report: OptimizeReport,
}

pub fn cmd_optimize(cfg: &RunConfig, force: bool) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    require_stage(&ws, "sample-mixtures", cfg, force)?;
    require_stage(&ws, "measure", cfg, force)?;
    let entry = cfg.optimizer.family_entry();
    let caches = if entry.needs_caches() {
        require_stage(&ws, "build-caches", cfg, force)?;
        Some(load_cache_set(&ws, cfg)?)
    } else {
        None
    };
    let data = load_measured(&ws)?;
    let spec = entry.feature_spec(&cfg.validation_ids());
    let opts = FitOptions {
        cv_folds: cfg.regression.cv_folds,
        corner_policy: cfg.regression.corner_policy,
        seed: derive_seed(cfg.seed, "fit"),
    };
    let predictor = fit_predictor(entry.family, &data, &spec, caches.as_ref(), &opts)?;
    let aggregator: Aggregator = cfg
        .aggregators()
        .into_iter()
        .find(|(name, _)| *name == cfg.optimizer.aggregator)
        .map(|(_, agg)| agg)
        .expect("config validated: aggregator exists");
    let search = OptimizeConfig {
        n_random: cfg.optimizer.n_random,
        n_refine_iters: cfg.optimizer.n_refine_iters,
        step_init: cfg.optimizer.step_init,
        tol: cfg.optimizer.tol,
        seed: derive_seed(cfg.seed, "optimizer"),
        smoothing: cfg.optimizer.smoothing,
    };
    let report = optimize(&predictor, &aggregator, caches.as_ref(), cfg.domains.len(), &search)?;
    let out = OptimizeOutput {
        family: entry.family,
        features: entry.features,
        aggregator: cfg.optimizer.aggregator.clone(),
        report,
    };
    ws.ensure("reports")?;
    let path = ws.join("reports/optimize.json");
    write_json(&out, &path)?;
    let weights: Vec<String> = out
        .report
        .selected()
        .as_slice()
        .iter()
        .map(|w| format!("{w:.4}"))
        .collect();
    println!(
        "best mixture [{}] with predicted objective {:.6}",
        weights.join(", "),
        out.report.score
    );
    let inputs = BTreeMap::from([(
        "measurements.csv".to_string(),
        file_sha256(&ws.join("measurements.csv"))?,
    )]);
    let outputs = BTreeMap::from([(
        "reports/optimize.json".to_string(),
        file_sha256(&path)?,
    )]);
    finish_stage(&ws, "optimize", cfg, inputs, outputs)
}

pub fn cmd_verify_prop1(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::new(&cfg.workspace);
    let p = &cfg.prop1;
    let report = verify_random_instances(
        derive_seed(cfg.seed, "prop1"),
        p.instances,
        p.k_max,
        p.x_max,
        p.y_max,
        p.tol,
    )?;
    ws.ensure("reports")?;
    let path = ws.join("reports/prop1.json");
    write_json(&report, &path)?;
    let outputs = BTreeMap::from([("reports/prop1.json".to_string(), file_sha256(&path)?)]);
    finish_stage(&ws, "verify-prop1", cfg, BTreeMap::new(), outputs)?;
    println!(
        "{} instances, max |diff| {:.3e}: {}",
        report.instances,
        report.max_abs_diff,
        if report.pass { "pass" } else { "FAIL" }
    );
    if !report.pass {
        return Err(Error::VerificationFailed(format!(
            "{} of {} instances exceeded tolerance {:.1e}",
            report.failed_instances.len(),
            report.instances,
            report.tol
        )));
    }
    Ok(())
}
