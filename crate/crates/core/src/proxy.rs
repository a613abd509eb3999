//! Ground-truth measurements: train a small n-gram proxy on each sampled
//! mixture and record its true per-domain validation losses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_mixed_corpus_with, DomainCorpus, ValidationDomain, DEFAULT_SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::experts::{score_tokens, train_expert, NgramExpert, Smoothing};
use crate::mde::{LossVector, MixtureWeights};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub order: usize,
    pub token_budget: usize,
    pub smoothing: Smoothing,
    pub segment_len: usize,
    pub master_seed: u64,
}

impl ProxyConfig {
    pub fn new(order: usize, token_budget: usize, master_seed: u64) -> Self {
        Self {
            order,
            token_budget,
            smoothing: Smoothing::default_for(order),
            segment_len: DEFAULT_SEGMENT_LEN,
            master_seed,
        }
    }
}

/// One mixture's ground truth: its weights and measured per-domain losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub mixture_id: usize,
    pub lambda: MixtureWeights,
    pub losses: LossVector,
}

/// Provenance stored alongside measurements so downstream stages can check
/// they were produced by the configuration they expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub order: usize,
    pub token_budget: usize,
    pub segment_len: usize,
    pub smoothing: Smoothing,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixtures_file: Option<String>,
}

impl Provenance {
    pub fn from_config(cfg: &ProxyConfig) -> Self {
        Self {
            order: cfg.order,
            token_budget: cfg.token_budget,
            segment_len: cfg.segment_len,
            smoothing: cfg.smoothing.clone(),
            master_seed: cfg.master_seed,
            mixtures_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub records: Vec<MeasurementRecord>,
    pub provenance: Provenance,
}

impl MeasurementSet {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InsufficientData("measurement set has no records".into()));
        }
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.mixture_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InsufficientData("duplicate mixture ids".into()));
        }
        let domains: Vec<&str> = self.records[0].losses.domains().collect();
        for r in &self.records {
            let d: Vec<&str> = r.losses.domains().collect();
            if d != domains {
                return Err(Error::InsufficientData(format!(
                    "mixture {} measures domains {d:?}, expected {domains:?}",
                    r.mixture_id
                )));
            }
            r.losses.validate()?;
        }
        Ok(())
    }

    /// Domain ids covered by every record, in sorted order.
    pub fn domain_ids(&self) -> Vec<String> {
        self.records
            .first()
            .map(|r| r.losses.domains().map(str::to_owned).collect())
            .unwrap_or_default()
    }

    pub fn num_mixture_components(&self) -> usize {
        self.records.first().map(|r| r.lambda.len()).unwrap_or(0)
    }
}

/// Train one proxy model on a freshly sampled mixed corpus.
pub fn train_proxy(
    domains: &[DomainCorpus],
    lambda: &MixtureWeights,
    token_budget: usize,
    order: usize,
    smoothing: &Smoothing,
    seed: u64,
) -> Result<NgramExpert> {
    train_proxy_with(domains, lambda, token_budget, order, smoothing, seed, DEFAULT_SEGMENT_LEN)
}

pub fn train_proxy_with(
    domains: &[DomainCorpus],
    lambda: &MixtureWeights,
    token_budget: usize,
    order: usize,
    smoothing: &Smoothing,
    seed: u64,
    segment_len: usize,
) -> Result<NgramExpert> {
    if token_budget < order {
        return Err(Error::CorpusTooShort {
            len: token_budget,
            order,
        });
    }
    let corpus = sample_mixed_corpus_with(domains, lambda, token_budget, seed, segment_len)?;
    train_expert(&corpus, order, smoothing)
}

/// True mean negative log-probability of the proxy on each domain.
pub fn measure(proxy: &NgramExpert, domains: &[ValidationDomain]) -> Result<LossVector> {
    let mut out = LossVector::default();
    for d in domains {
        let probs = score_tokens(proxy, d)?;
        let mut log_sum = 0.0;
        for p in &probs {
            log_sum += p.ln();
        }
        out.insert(d.id.clone(), -(log_sum / probs.len() as f64));
    }
    Ok(out)
}

/// Measure every mixture: record n trains its proxy with a seed derived
/// from the master seed and n alone, so the set is reproducible and
/// independent of evaluation order or thread count.
pub fn build_measurement_set(
    domains: &[DomainCorpus],
    val_domains: &[ValidationDomain],
    mixtures: &[MixtureWeights],
    cfg: &ProxyConfig,
) -> Result<MeasurementSet> {
    if mixtures.is_empty() {
        return Err(Error::InsufficientData("no mixtures to measure".into()));
    }
    let records: Vec<MeasurementRecord> = mixtures
        .par_iter()
        .enumerate()
        .map(|(n, lambda)| {
            let seed = derive_seed(cfg.master_seed, &format!("proxy/{n}"));
            let proxy = train_proxy_with(
                domains,
                lambda,
                cfg.token_budget,
                cfg.order,
                &cfg.smoothing,
                seed,
                cfg.segment_len,
            )?;
            Ok(MeasurementRecord {
                mixture_id: n,
                lambda: lambda.clone(),
                losses: measure(&proxy, val_domains)?,
            })
        })
        .collect::<Result<_>>()?;
    let set = MeasurementSet {
        records,
        provenance: Provenance::from_config(cfg),
    };
    set.validate()?;
    Ok(set)
}

/// Write measurements as CSV rows `mixture_id,domain_id,loss` (12
/// significant digits), one row per record and domain, plus a sidecar
/// manifest holding the provenance.
pub fn write_measurements(set: &MeasurementSet, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    set.validate()?;
    let mut out = String::from("mixture_id,domain_id,loss\n");
    for r in &set.records {
        for (domain, loss) in &r.losses.per_domain {
            let _ = writeln!(out, "{},{domain},{loss:.11e}", r.mixture_id);
        }
    }
    std::fs::write(csv_path, out).map_err(|e| Error::io(csv_path, e))?;
    let mpath = measurements_manifest_path(csv_path);
    let text = serde_json::to_string_pretty(&set.provenance).expect("provenance serializes");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub fn measurements_manifest_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("manifest.json")
}

/// Load measurements, joining mixture weights back in by id from the
/// mixtures list the measurements were produced from.
pub fn load_measurements(
    csv_path: impl AsRef<Path>,
    mixtures: &[MixtureWeights],
) -> Result<MeasurementSet> {
    let csv_path = csv_path.as_ref();
    let mpath = measurements_manifest_path(csv_path);
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let provenance: Provenance = serde_json::from_str(&mtext)
        .map_err(|e| Error::parse(&mpath, "measurement manifest", e.to_string()))?;

    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("mixture_id,domain_id,loss") {
        return Err(Error::parse(csv_path, "measurements", "bad header"));
    }
    let mut by_id: BTreeMap<usize, LossVector> = BTreeMap::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(csv_path, "measurements", format!("row {row} has {} fields", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(csv_path, "measurements", format!("bad mixture_id {:?}", fields[0])))?;
        let loss: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(csv_path, "measurements", format!("bad loss {:?}", fields[2])))?;
        by_id.entry(id).or_default().insert(fields[1], loss);
    }
    let records: Vec<MeasurementRecord> = by_id
        .into_iter()
        .map(|(mixture_id, losses)| {
            let lambda = mixtures.get(mixture_id).cloned().ok_or_else(|| {
                Error::parse(
                    csv_path,
                    "measurements",
                    format!("mixture_id {mixture_id} not present in the mixtures file"),
                )
            })?;
            Ok(MeasurementRecord {
                mixture_id,
                lambda,
                losses,
            })
        })
        .collect::<Result<_>>()?;
    let set = MeasurementSet {
        records,
        provenance,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_domain, DomainGroup, SyntheticDomainSpec};
    use crate::experts::NgramExpert;

    fn two_domains() -> Vec<DomainCorpus> {
        let spec_a = SyntheticDomainSpec {
            vocab_size: 3,
            prefix_marginal: vec![1.0 / 3.0; 3],
            conditionals: vec![
                vec![0.7, 0.2, 0.1],
                vec![0.2, 0.7, 0.1],
                vec![0.1, 0.2, 0.7],
            ],
            seed: 100,
        };
        let spec_b = SyntheticDomainSpec {
            vocab_size: 3,
            prefix_marginal: vec![1.0 / 3.0; 3],
            conditionals: vec![
                vec![0.1, 0.2, 0.7],
                vec![0.7, 0.1, 0.2],
                vec![0.2, 0.7, 0.1],
            ],
            seed: 101,
        };
        vec![
            generate_synthetic_domain("a", &spec_a, 30_000).unwrap(),
            generate_synthetic_domain("b", &spec_b, 30_000).unwrap(),
        ]
    }

    #[test]
    fn one_hot_proxy_reproduces_the_same_training_draw() {
        let domains = two_domains();
        let sm = Smoothing::default_for(2);
        let hot = MixtureWeights::one_hot(2, 0);
        let expert = train_proxy(&domains, &hot, 5000, 2, &sm, 77).unwrap();
        let proxy = train_proxy(&domains, &hot, 5000, 2, &sm, 77).unwrap();
        assert_eq!(expert, proxy);
    }

    #[test]
    fn identical_sources_give_single_domain_statistics() {
        let a = two_domains().remove(0);
        let twin = DomainCorpus::new("twin", a.tokens.clone(), a.vocab_size).unwrap();
        let sm = Smoothing::default_for(2);
        let balanced = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        let proxy = train_proxy(&[a.clone(), twin], &balanced, 20_000, 2, &sm, 3).unwrap();
        let direct = train_proxy(std::slice::from_ref(&a), &MixtureWeights::uniform(1), 20_000, 2, &sm, 3).unwrap();
        for ctx in 0..3u32 {
            for y in 0..3u32 {
                let d = (proxy.conditional(&[ctx], y) - direct.conditional(&[ctx], y)).abs();
                assert!(d < 0.05, "context {ctx}, token {y} differs by {d}");
            }
        }
    }

    #[test]
    fn uniform_proxy_loss_is_log_vocab() {
        let proxy = NgramExpert::untrained("u", 4, 2, Smoothing::default_for(2)).unwrap();
        let val = vec![
            ValidationDomain::new("v1", vec![0, 1, 2, 3, 0], DomainGroup::SpLike).unwrap(),
            ValidationDomain::new("v2", vec![3, 3, 1], DomainGroup::EtLike).unwrap(),
        ];
        let losses = measure(&proxy, &val).unwrap();
        assert!((losses.get("v1").unwrap() - 4.0f64.ln()).abs() < 1e-12);
        assert!((losses.get("v2").unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_domain_list_gives_empty_losses() {
        let proxy = NgramExpert::untrained("u", 4, 2, Smoothing::default_for(2)).unwrap();
        let losses = measure(&proxy, &[]).unwrap();
        assert!(losses.per_domain.is_empty());
    }

    #[test]
    fn matched_proxy_beats_foreign_proxy_on_its_domain() {
        let domains = two_domains();
        let sm = Smoothing::default_for(2);
        let val = ValidationDomain::from_corpus(&domains[0], DomainGroup::SpLike);
        let own = train_proxy(&domains, &MixtureWeights::one_hot(2, 0), 20_000, 2, &sm, 5).unwrap();
        let foreign = train_proxy(&domains, &MixtureWeights::one_hot(2, 1), 20_000, 2, &sm, 5).unwrap();
        let l_own = measure(&own, std::slice::from_ref(&val)).unwrap().get("a").unwrap();
        let l_foreign = measure(&foreign, std::slice::from_ref(&val)).unwrap().get("a").unwrap();
        assert!(l_own < l_foreign);
    }

    #[test]
    fn larger_budget_does_not_hurt_on_average() {
        let domains = two_domains();
        let sm = Smoothing::default_for(2);
        let lambda = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        let val: Vec<ValidationDomain> = domains
            .iter()
            .map(|d| ValidationDomain::from_corpus(d, DomainGroup::SpLike))
            .collect();
        let mean_loss = |budget: usize| {
            let mut total = 0.0;
            for seed in 0..20 {
                let proxy = train_proxy(&domains, &lambda, budget, 2, &sm, seed).unwrap();
                let l = measure(&proxy, &val).unwrap();
                total += (l.get("a").unwrap() + l.get("b").unwrap()) / 2.0;
            }
            total / 20.0
        };
        assert!(mean_loss(16_000) <= mean_loss(2_000));
    }

    fn small_measurement_setup() -> (Vec<DomainCorpus>, Vec<ValidationDomain>, Vec<MixtureWeights>, ProxyConfig) {
        let domains = two_domains();
        let val: Vec<ValidationDomain> = domains
            .iter()
            .map(|d| ValidationDomain::from_corpus(d, DomainGroup::SpLike))
            .collect();
        let mixtures = vec![
            MixtureWeights::one_hot(2, 0),
            MixtureWeights::new(vec![0.5, 0.5]).unwrap(),
            MixtureWeights::new(vec![0.2, 0.8]).unwrap(),
        ];
        (domains, val, mixtures, ProxyConfig::new(2, 4000, 55))
    }

    #[test]
    fn measurement_set_is_deterministic_with_distinct_ids() {
        let (domains, val, mixtures, cfg) = small_measurement_setup();
        let a = build_measurement_set(&domains, &val, &mixtures, &cfg).unwrap();
        let b = build_measurement_set(&domains, &val, &mixtures, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 3);
        let ids: Vec<usize> = a.records.iter().map(|r| r.mixture_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn one_hot_record_matches_direct_expert_measurement() {
        let (domains, val, mixtures, cfg) = small_measurement_setup();
        let set = build_measurement_set(&domains, &val, &mixtures, &cfg).unwrap();
        let seed = derive_seed(cfg.master_seed, "proxy/0");
        let expert = train_proxy_with(
            &domains,
            &mixtures[0],
            cfg.token_budget,
            cfg.order,
            &cfg.smoothing,
            seed,
            cfg.segment_len,
        )
        .unwrap();
        let direct = measure(&expert, &val).unwrap();
        assert_eq!(set.records[0].losses, direct);
    }

    #[test]
    fn measurements_csv_round_trip() {
        let (domains, val, mixtures, cfg) = small_measurement_setup();
        let set = build_measurement_set(&domains, &val, &mixtures, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("measurements.csv");
        write_measurements(&set, &path).unwrap();
        let loaded = load_measurements(&path, &mixtures).unwrap();
        assert_eq!(loaded.provenance, set.provenance);
        assert_eq!(loaded.records.len(), set.records.len());
        for (a, b) in loaded.records.iter().zip(&set.records) {
            assert_eq!(a.mixture_id, b.mixture_id);
            for (d, &l) in &a.losses.per_domain {
                assert!((l - b.losses.get(d).unwrap()).abs() < 1e-10);
            }
        }
        // A second write of the loaded set is byte-identical.
        let path2 = dir.path().join("measurements2.csv");
        write_measurements(&loaded, &path2).unwrap();
        let reloaded = load_measurements(&path2, &mixtures).unwrap();
        assert_eq!(loaded, reloaded);
    }
}
