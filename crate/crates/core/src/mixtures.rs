//! Training-mixture sampling and post-optimization smoothing.
//!
//! Mixtures are drawn from a Dirichlet whose concentration interpolates
//! between the uniform distribution and the observed per-domain token
//! frequencies, with a per-sample scale factor. Each sample has its own
//! RNG stream keyed by (seed, index), so parallel or out-of-order sampling
//! reproduces the same list.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mde::MixtureWeights;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSamplerConfig {
    pub k: usize,
    /// Per-domain token frequencies, a point on the k-simplex.
    pub domain_freqs: Vec<f64>,
    /// Weight of the uniform distribution in the concentration mean.
    pub uniform_weight: f64,
    /// Dirichlet scale factor is drawn uniformly from this range.
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl MixtureSamplerConfig {
    pub fn with_defaults(k: usize, domain_freqs: Vec<f64>, seed: u64) -> Self {
        Self {
            k,
            domain_freqs,
            uniform_weight: 0.5,
            scale_range: (0.5, 2.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("sampler.k", "must be positive"));
        }
        if self.domain_freqs.len() != self.k {
            return Err(Error::config(
                "sampler.domain_freqs",
                format!("expected {} entries, got {}", self.k, self.domain_freqs.len()),
            ));
        }
        if self.domain_freqs.iter().any(|&f| !f.is_finite() || f < 0.0) {
            return Err(Error::config(
                "sampler.domain_freqs",
                "frequencies must be finite and non-negative",
            ));
        }
        let sum: f64 = self.domain_freqs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "sampler.domain_freqs",
                format!("frequencies sum to {sum}, expected 1"),
            ));
        }
        if !(0.0..=1.0).contains(&self.uniform_weight) {
            return Err(Error::config("sampler.uniform_weight", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
            return Err(Error::config(
                "sampler.scale_range",
                "need 0 < lo <= hi < inf",
            ));
        }
        for (i, a) in self.concentration_base().iter().enumerate() {
            if !(*a > 0.0) {
                return Err(Error::config(
                    "sampler",
                    format!(
                        "concentration for domain {i} is zero; raise uniform_weight or the domain frequency"
                    ),
                ));
            }
        }
        Ok(())
    }

    /// w·(1/k)·𝟙 + (1−w)·freqs, before the per-sample scale factor.
    fn concentration_base(&self) -> Vec<f64> {
        let w = self.uniform_weight;
        self.domain_freqs
            .iter()
            .map(|f| w / self.k as f64 + (1.0 - w) * f)
            .collect()
    }
}

/// Draw `n` mixtures; sample `index` depends only on (cfg.seed, index).
pub fn sample_mixtures(cfg: &MixtureSamplerConfig, n: usize) -> Result<Vec<MixtureWeights>> {
    assert!(n >= 1, "n must be positive");
    cfg.validate()?;
    let base = cfg.concentration_base();
    let (lo, hi) = cfg.scale_range;
    (0..n as u64)
        .map(|index| {
            let mut rng = stream_rng(cfg.seed, "mixture", index);
            let s = if lo == hi { lo } else { rng.random_range(lo..hi) };
            loop {
                let draws: Vec<f64> = base
                    .iter()
                    .map(|&a| Gamma::new(s * a, 1.0).expect("positive shape").sample(&mut rng))
                    .collect();
                if draws.iter().sum::<f64>() > 0.0 {
                    return MixtureWeights::renormalized(draws);
                }
                // All-zero underflow is possible for tiny shapes; redraw
                // from the same stream so the result stays deterministic.
            }
        })
        .collect()
}

/// Prepend the k one-hot corner mixtures, dropping any exact corners
/// already present so the operation is idempotent.
pub fn include_expert_corners(mixtures: &[MixtureWeights], k: usize) -> Vec<MixtureWeights> {
    let corners: Vec<MixtureWeights> = (0..k).map(|i| MixtureWeights::one_hot(k, i)).collect();
    let mut out = corners.clone();
    out.extend(
        mixtures
            .iter()
            .filter(|m| !corners.contains(m))
            .cloned(),
    );
    out
}

/// Pull an optimized mixture slightly toward uniform:
/// λ̂ = 0.99·λ + 0.01·(1/k)𝟙. Keeps every domain's weight positive.
pub fn smooth_mixture(lambda_opt: &MixtureWeights) -> MixtureWeights {
    let k = lambda_opt.len() as f64;
    let smoothed: Vec<f64> = lambda_opt
        .as_slice()
        .iter()
        .map(|&w| 0.99 * w + 0.01 / k)
        .collect();
    MixtureWeights::new(smoothed).expect("affine map preserves the simplex")
}

/// Write mixtures as CSV: `mixture_id,w_0,...,w_{k-1}`, 12 significant
/// digits per weight, ids are the 0-based row order.
pub fn write_mixtures(mixtures: &[MixtureWeights], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mixtures.is_empty() {
        return Err(Error::InvalidWeights("no mixtures to write".into()));
    }
    let k = mixtures[0].len();
    let mut out = String::from("mixture_id");
    for i in 0..k {
        let _ = write!(out, ",w_{i}");
    }
    out.push('\n');
    for (id, m) in mixtures.iter().enumerate() {
        if m.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "mixture {id} has {} components, expected {k}",
                m.len()
            )));
        }
        let _ = write!(out, "{id}");
        for &w in m.as_slice() {
            let _ = write!(out, ",{w:.11e}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a mixtures CSV; rows are renormalized to absorb the serialized
/// precision so the simplex invariant holds exactly.
pub fn load_mixtures(path: impl AsRef<Path>) -> Result<Vec<MixtureWeights>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "mixtures", "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"mixture_id") || cols.len() < 2 {
        return Err(Error::parse(path, "mixtures", "bad header"));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("w_{i}") {
            return Err(Error::parse(path, "mixtures", format!("bad column {c:?}")));
        }
    }
    let k = cols.len() - 1;
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(Error::parse(path, "mixtures", format!("row {row} has {} fields", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, "mixtures", format!("bad mixture_id {:?}", fields[0])))?;
        if id != row {
            return Err(Error::parse(path, "mixtures", format!("row {row} has mixture_id {id}")));
        }
        let weights: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::parse(path, "mixtures", format!("bad weight {f:?} in row {row}")))
            })
            .collect::<Result<_>>()?;
        out.push(MixtureWeights::renormalized(weights)?);
    }
    if out.is_empty() {
        return Err(Error::parse(path, "mixtures", "no mixture rows"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> MixtureSamplerConfig {
        MixtureSamplerConfig::with_defaults(2, vec![0.8, 0.2], 7)
    }

    #[test]
    fn concentration_formula() {
        let mut cfg = base_config();
        cfg.scale_range = (2.0, 2.0);
        let base = cfg.concentration_base();
        let alpha: Vec<f64> = base.iter().map(|b| 2.0 * b).collect();
        assert!((alpha[0] - 1.3).abs() < 1e-15);
        assert!((alpha[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn samples_lie_on_the_simplex() {
        let cfg = base_config();
        for m in sample_mixtures(&cfg, 200).unwrap() {
            let sum: f64 = m.as_slice().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(m.as_slice().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn high_concentration_uniform_mean() {
        let cfg = MixtureSamplerConfig {
            k: 3,
            domain_freqs: vec![0.7, 0.2, 0.1],
            uniform_weight: 1.0,
            scale_range: (1000.0, 1000.0),
            seed: 13,
        };
        let samples = sample_mixtures(&cfg, 1000).unwrap();
        for i in 0..3 {
            let mean: f64 = samples.iter().map(|m| m[i]).sum::<f64>() / samples.len() as f64;
            assert!((mean - 1.0 / 3.0).abs() < 0.05, "component {i} mean {mean}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_per_index() {
        let cfg = base_config();
        let a = sample_mixtures(&cfg, 10).unwrap();
        let b = sample_mixtures(&cfg, 10).unwrap();
        assert_eq!(a, b);
        // A shorter run yields a prefix of the longer one.
        let c = sample_mixtures(&cfg, 3).unwrap();
        assert_eq!(&a[..3], &c[..]);
    }

    #[test]
    fn rejects_degenerate_config() {
        let mut cfg = base_config();
        cfg.domain_freqs = vec![0.0, 0.0];
        assert!(sample_mixtures(&cfg, 1).is_err());

        let mut cfg = base_config();
        cfg.uniform_weight = 0.0;
        cfg.domain_freqs = vec![1.0, 0.0];
        assert!(matches!(sample_mixtures(&cfg, 1), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn corners_prepend_and_never_duplicate() {
        let empty = include_expert_corners(&[], 3);
        assert_eq!(
            empty,
            vec![
                MixtureWeights::one_hot(3, 0),
                MixtureWeights::one_hot(3, 1),
                MixtureWeights::one_hot(3, 2),
            ]
        );
        let twice = include_expert_corners(&empty, 3);
        assert_eq!(twice, empty);

        let mid = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        let with_mid = include_expert_corners(std::slice::from_ref(&mid), 2);
        assert_eq!(with_mid.len(), 3);
        assert_eq!(with_mid[2], mid);
    }

    #[test]
    fn smoothing_matches_affine_formula() {
        let hat = smooth_mixture(&MixtureWeights::one_hot(3, 0));
        assert!((hat[0] - (0.99 + 0.01 / 3.0)).abs() < 1e-12);
        assert!((hat[1] - 0.01 / 3.0).abs() < 1e-12);
        assert!((hat[2] - 0.01 / 3.0).abs() < 1e-12);

        let uniform = MixtureWeights::uniform(4);
        let fixed = smooth_mixture(&uniform);
        for (a, b) in fixed.as_slice().iter().zip(uniform.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }

        for k in 1..6 {
            let spiky = smooth_mixture(&MixtureWeights::one_hot(k, 0));
            let min = spiky.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= 0.01 / k as f64 - 1e-15);
        }
    }

    #[test]
    fn mixtures_csv_round_trip() {
        let cfg = base_config();
        let mixtures = include_expert_corners(&sample_mixtures(&cfg, 5).unwrap(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixtures.csv");
        write_mixtures(&mixtures, &path).unwrap();
        let loaded = load_mixtures(&path).unwrap();
        assert_eq!(loaded.len(), mixtures.len());
        for (a, b) in loaded.iter().zip(&mixtures) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        // Corners survive the round trip exactly.
        assert_eq!(loaded[0], MixtureWeights::one_hot(2, 0));

        let path2 = dir.path().join("mixtures2.csv");
        write_mixtures(&loaded, &path2).unwrap();
        let reloaded = load_mixtures(&path2).unwrap();
        assert_eq!(loaded, reloaded);
    }
}
