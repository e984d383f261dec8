//! Predicting training memory and latency of pruned CNNs from analytical
//! convolution features.
//!
//! The pipeline: describe a network ([`network`]), derive per-layer
//! algorithmic features ([`features`]), join them with profiled measurements
//! ([`dataset`]), fit one random forest per attribute ([`forest`],
//! [`predictor`]), and use the predictors as feasibility oracles in a
//! constrained architecture search ([`search`]).

pub mod dataset;
pub mod features;
pub mod forest;
pub mod network;
pub mod predictor;
pub mod scalar;
pub mod search;
pub mod synthetic;

pub use dataset::{Attribute, ProfileRecord, ProfilingPlan};
pub use features::{extract_features, FeatureSchema, FeatureVector};
pub use forest::{Forest, ForestConfig};
pub use network::{ConvLayerSpec, NetworkSpec};
pub use predictor::{AttributeModelSet, AttributePredictor};
pub use scalar::{Exact, FeatureScalar};

pub type FeatureVector64 = FeatureVector<f64>;
pub type FeatureVector32 = FeatureVector<f32>;
pub type ExactFeatureVector = FeatureVector<Exact>;
pub type Forest64 = Forest<f64>;
pub type Forest32 = Forest<f32>;
