//! Data-mixture optimization at desk scale.
//!
//! Train one smoothed n-gram "data expert" per training domain, cache
//! per-token expert probabilities on validation streams, and estimate any
//! mixture's validation loss by interpolating those probabilities before
//! the log. The estimates feed loss-surrogate regressors, a simplex
//! search for the best mixture, and an exact finite-distribution oracle
//! that checks the underlying identity.
//!
//! Pipeline, end to end:
//!
//! 1. [`experts`]: train per-domain n-gram experts, cache probabilities.
//! 2. [`mde`]: mixture-weighted ensemble losses from the caches.
//! 3. [`mixtures`]: Dirichlet sampling of candidate mixtures.
//! 4. [`proxy`]: ground truth by training small proxies on mixed corpora.
//! 5. [`regression`]: surrogate families predicting loss from features.
//! 6. [`eval`]: metrics over repeated train/test splits.
//! 7. [`optimizer`]: derivative-free search over the simplex.
//! 8. [`oracle`]: exact verification on finite distributions.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experts;
pub mod mde;
pub mod mixtures;
pub mod optimizer;
pub mod oracle;
pub mod proxy;
pub mod regression;
pub mod rng;

pub use error::{Error, Result};
pub use experts::{NgramExpert, ProbCache, Smoothing};
pub use mde::{
    mde_domain_loss, mde_features, mde_loss_vector, Aggregator, CacheSet, LossVector,
    MixtureWeights,
};
pub use mixtures::{sample_mixtures, smooth_mixture, MixtureSamplerConfig};
pub use proxy::{MeasurementSet, ProxyConfig};
pub use regression::{fit_predictor, Family, FeatureSpec, FitOptions, Predictor};
