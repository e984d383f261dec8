//! # Random forest regression
//!
//! Bagged CART regression trees. Each node is split on the feature and
//! threshold that minimise the summed squared error of the two children;
//! candidate thresholds are midpoints between consecutive distinct values and
//! a row goes left iff `value <= threshold`. Leaves predict the mean target of
//! the training rows that reached them, and the forest averages its trees.
//!
//! Training is deterministic: tree `i` draws all of its randomness from
//! `seed + i`, so trees may be grown in parallel without changing the result.

mod io;
mod tree;

use std::collections::BTreeMap;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{FORMAT_NAME, FORMAT_VERSION};
pub use tree::TreeNode;

/// Floating-point types a forest can be trained in.
pub trait ForestFloat: Float + Serialize + DeserializeOwned + Send + Sync + std::fmt::Debug + 'static {}

impl<F> ForestFloat for F where F: Float + Serialize + DeserializeOwned + Send + Sync + std::fmt::Debug + 'static {}

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("cannot fit: {0}")]
    Fit(String),
    #[error("expected {expected} features, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported model file version {found} (this build reads {FORMAT_NAME} v{FORMAT_VERSION})")]
    Version { found: String },
    #[error("checksum error: {0}")]
    Checksum(String),
}

/// Number of features examined at each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaxFeatures {
    All,
    Sqrt,
    Fraction(f64),
}

impl MaxFeatures {
    fn count(&self, total: usize) -> usize {
        let k = match *self {
            MaxFeatures::All => total,
            MaxFeatures::Sqrt => (total as f64).sqrt().floor() as usize,
            MaxFeatures::Fraction(f) => (f * total as f64).ceil() as usize,
        };
        k.clamp(1, total.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub features_per_split: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
    /// Fit `ln(y)` instead of `y`; predictions are transformed back.
    pub log_target: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: MaxFeatures::All,
            bootstrap: true,
            seed: 0,
            log_target: false,
        }
    }
}

impl ForestConfig {
    /// Single unbagged tree grown to purity: reproduces every distinct
    /// training row exactly.
    pub fn interpolating() -> Self {
        Self { n_trees: 1, bootstrap: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::Fit("n_trees must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(ForestError::Fit("min_samples_leaf must be >= 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(ForestError::Fit("max_depth must be >= 1".into()));
        }
        if let MaxFeatures::Fraction(f) = self.features_per_split {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ForestError::Fit(format!("feature fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: ForestFloat")]
pub struct Forest<F> {
    trees: Vec<TreeNode<F>>,
    config: ForestConfig,
    feature_names: Vec<String>,
    /// Free-form tag naming the feature definitions the forest expects.
    feature_set: String,
    target_name: String,
    target_range: (F, F),
}

impl<F: ForestFloat> Forest<F> {
    /// Fit a forest on row-major `rows` with one target per row.
    pub fn fit(
        rows: &[Vec<F>],
        targets: &[F],
        feature_names: Vec<String>,
        target_name: impl Into<String>,
        config: &ForestConfig,
    ) -> Result<Self, ForestError> {
        config.validate()?;
        if rows.is_empty() {
            return Err(ForestError::Fit("no training rows".into()));
        }
        if rows.len() != targets.len() {
            return Err(ForestError::Fit(format!("{} rows but {} targets", rows.len(), targets.len())));
        }
        if rows.len() < config.min_samples_leaf {
            return Err(ForestError::Fit(format!(
                "{} rows is fewer than min_samples_leaf={}",
                rows.len(),
                config.min_samples_leaf
            )));
        }
        let width = feature_names.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(ForestError::Fit(format!("row {i} has {} values, expected {width}", row.len())));
        }
        if rows.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
            return Err(ForestError::Fit("non-finite value in training data".into()));
        }
        if config.log_target && targets.iter().any(|&t| t <= F::zero()) {
            return Err(ForestError::Fit("log_target requires strictly positive targets".into()));
        }

        let fitted: Vec<F> = if config.log_target { targets.iter().map(|t| t.ln()).collect() } else { targets.to_vec() };
        let columns: Vec<Vec<F>> = (0..width).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let data = tree::TrainingData { columns: &columns, targets: &fitted };
        let features_per_split = config.features_per_split.count(width);

        let trees = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(t as u64));
                let sample = tree::sample_rows(rows.len(), config.bootstrap, &mut rng);
                tree::grow(&data, sample, config, features_per_split, &mut rng)
            })
            .collect();

        let (lo, hi) = targets.iter().fold((F::infinity(), F::neg_infinity()), |(lo, hi), &t| (lo.min(t), hi.max(t)));
        Ok(Self {
            trees,
            config: config.clone(),
            feature_names,
            feature_set: String::new(),
            target_name: target_name.into(),
            target_range: (lo, hi),
        })
    }

    pub fn with_feature_set(mut self, tag: impl Into<String>) -> Self {
        self.feature_set = tag.into();
        self
    }

    pub fn predict(&self, row: &[F]) -> Result<F, ForestError> {
        if row.len() != self.feature_names.len() {
            return Err(ForestError::Shape { expected: self.feature_names.len(), got: row.len() });
        }
        let outputs: Vec<F> = self.trees.iter().map(|t| t.route(row)).collect();
        let mean = if outputs.iter().all(|&o| o == outputs[0]) {
            outputs[0]
        } else {
            outputs.iter().fold(F::zero(), |acc, &o| acc + o) / F::from(outputs.len()).expect("tree count fits")
        };
        let value = if self.config.log_target { mean.exp() } else { mean };
        // the mean of in-range values is in range; clamp away rounding
        Ok(value.max(self.target_range.0).min(self.target_range.1))
    }

    pub fn predict_many(&self, rows: &[Vec<F>]) -> Result<Vec<F>, ForestError> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    /// Impurity-decrease importances normalised to sum to one; all zero when
    /// no tree has a split.
    pub fn feature_importance(&self) -> BTreeMap<String, f64> {
        let mut totals = vec![0.0f64; self.feature_names.len()];
        for t in &self.trees {
            t.accumulate_importance(&mut totals);
        }
        let sum: f64 = totals.iter().sum();
        self.feature_names
            .iter()
            .zip(totals)
            .map(|(name, v)| (name.clone(), if sum > 0.0 { v / sum } else { 0.0 }))
            .collect()
    }

    pub fn trees(&self) -> &[TreeNode<F>] {
        &self.trees
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_set(&self) -> &str {
        &self.feature_set
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    /// `(min, max)` of the training targets.
    pub fn target_range(&self) -> (F, F) {
        self.target_range
    }
}
