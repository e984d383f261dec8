//! Per-attribute forests: training from a dataset, prediction for arbitrary
//! networks, and percentage-error evaluation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{join, Attribute, DatasetError, NetworkLibrary, ProfileRecord, RecordKey};
use crate::features::{extract_features, FeatureError};
use crate::forest::{Forest, ForestConfig, ForestError};
use crate::network::NetworkSpec;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

/// Anything that maps `(network, batch size)` to attribute values.
pub trait AttributePredictor: Sync {
    fn attributes(&self) -> Vec<Attribute>;

    fn predict(&self, attribute: Attribute, net: &NetworkSpec, bs: u32) -> Result<f64, PredictorError>;

    /// A value no prediction for `attribute` can fall below, if known.
    fn lower_bound(&self, _attribute: Attribute) -> Option<f64> {
        None
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttributeModelSet {
    models: BTreeMap<Attribute, Forest<f64>>,
}

impl AttributeModelSet {
    /// Add a forest; its target name must be an attribute column and its
    /// feature tag must match the attribute's feature schema.
    pub fn insert(&mut self, forest: Forest<f64>) -> Result<Attribute, PredictorError> {
        let attribute: Attribute = forest.target_name().parse().map_err(PredictorError::Shape)?;
        check_schema(attribute, &forest)?;
        if self.models.insert(attribute, forest).is_some() {
            return Err(PredictorError::Shape(format!("two models for {attribute}")));
        }
        Ok(attribute)
    }

    pub fn get(&self, attribute: Attribute) -> Option<&Forest<f64>> {
        self.models.get(&attribute)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Attribute, &Forest<f64>)> {
        self.models.iter().map(|(a, f)| (*a, f))
    }

    pub fn load_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self, PredictorError> {
        let mut set = Self::default();
        for p in paths {
            set.insert(Forest::load(p)?)?;
        }
        Ok(set)
    }
}

fn check_schema(attribute: Attribute, forest: &Forest<f64>) -> Result<(), PredictorError> {
    let schema = attribute.schema();
    if forest.feature_set() != schema.tag() || forest.feature_names() != schema.names().as_slice() {
        return Err(PredictorError::Shape(format!(
            "model for {attribute} was trained on features {:?}, this build extracts {:?}",
            forest.feature_set(),
            schema.tag()
        )));
    }
    Ok(())
}

impl AttributePredictor for AttributeModelSet {
    fn attributes(&self) -> Vec<Attribute> {
        self.models.keys().copied().collect()
    }

    fn predict(&self, attribute: Attribute, net: &NetworkSpec, bs: u32) -> Result<f64, PredictorError> {
        let forest = self
            .models
            .get(&attribute)
            .ok_or_else(|| PredictorError::Shape(format!("no model for {attribute}")))?;
        check_schema(attribute, forest)?;
        let features = extract_features::<f64>(net, bs, attribute.schema())?;
        Ok(forest.predict(features.values())?)
    }

    fn lower_bound(&self, attribute: Attribute) -> Option<f64> {
        self.models.get(&attribute).map(|f| f.target_range().0)
    }
}

/// Fit one forest per attribute with that attribute's feature schema.
pub fn train_models(
    records: &[ProfileRecord],
    library: &NetworkLibrary,
    attributes: &[Attribute],
    config: &ForestConfig,
) -> Result<AttributeModelSet, PredictorError> {
    let mut set = AttributeModelSet::default();
    for &attribute in attributes {
        let schema = attribute.schema();
        let matrix = join(records, library, attribute, schema)?;
        let forest = Forest::fit(&matrix.rows, &matrix.targets, matrix.feature_names, attribute.column(), config)?
            .with_feature_set(schema.tag());
        set.insert(forest)?;
    }
    Ok(set)
}

pub fn predict_attributes(
    predictor: &(impl AttributePredictor + ?Sized),
    net: &NetworkSpec,
    bs: u32,
) -> Result<BTreeMap<Attribute, f64>, PredictorError> {
    predictor.attributes().into_iter().map(|a| Ok((a, predictor.predict(a, net, bs)?))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordError {
    pub key: RecordKey,
    pub actual: f64,
    pub predicted: f64,
    /// Absolute percentage error, in percent.
    pub ape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeReport {
    #[serde(skip)]
    pub records: Vec<RecordError>,
    pub count: usize,
    pub mean_ape: f64,
    pub by_level: BTreeMap<u32, f64>,
    pub by_bs: BTreeMap<u32, f64>,
    pub by_network: BTreeMap<String, f64>,
    pub target: TargetStats,
}

fn group_means<K: Ord>(items: impl Iterator<Item = (K, f64)>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in items {
        let e = acc.entry(k).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

impl AttributeReport {
    fn from_records(records: Vec<RecordError>) -> Self {
        let n = records.len();
        let mean = |f: fn(&RecordError) -> f64| if n == 0 { 0.0 } else { records.iter().map(f).sum::<f64>() / n as f64 };
        let mean_ape = mean(|r| r.ape);
        let target = TargetStats {
            min: records.iter().map(|r| r.actual).fold(f64::INFINITY, f64::min),
            max: records.iter().map(|r| r.actual).fold(f64::NEG_INFINITY, f64::max),
            mean: mean(|r| r.actual),
        };
        Self {
            count: n,
            mean_ape,
            by_level: group_means(records.iter().map(|r| (r.key.pruning_level, r.ape))),
            by_bs: group_means(records.iter().map(|r| (r.key.bs, r.ape))),
            by_network: group_means(records.iter().map(|r| (r.key.network.clone(), r.ape))),
            target,
            records,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub attributes: BTreeMap<Attribute, AttributeReport>,
}

impl EvaluationReport {
    pub fn get(&self, attribute: Attribute) -> Option<&AttributeReport> {
        self.attributes.get(&attribute)
    }

    /// Per-record errors, one row per (attribute, record).
    pub fn write_errors_csv<W: Write>(&self, output: W) -> Result<(), PredictorError> {
        let mut w = csv::Writer::from_writer(output);
        let err = |e: csv::Error| PredictorError::Eval(e.to_string());
        w.write_record(["attribute", "network", "pruning_level", "strategy", "seed", "bs", "actual", "predicted", "ape_pct"])
            .map_err(err)?;
        for (attribute, report) in &self.attributes {
            for r in &report.records {
                w.write_record([
                    attribute.column().to_string(),
                    r.key.network.clone(),
                    r.key.pruning_level.to_string(),
                    r.key.strategy.clone(),
                    r.key.seed.to_string(),
                    r.key.bs.to_string(),
                    r.actual.to_string(),
                    r.predicted.to_string(),
                    r.ape.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| PredictorError::Eval(e.to_string()))
    }

    /// Grouped means per attribute.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialises")
    }
}

/// Absolute percentage error of every record for every attribute the
/// predictor covers. Records lacking an optional attribute are skipped.
pub fn evaluate(
    predictor: &(impl AttributePredictor + ?Sized),
    records: &[ProfileRecord],
    library: &NetworkLibrary,
) -> Result<EvaluationReport, PredictorError> {
    let mut variants: HashMap<String, NetworkSpec> = HashMap::new();
    for r in records {
        let key = r.key();
        if !variants.contains_key(&key.variant_id()) {
            variants.insert(key.variant_id(), library.variant(&key)?);
        }
    }
    let mut report = EvaluationReport::default();
    for attribute in predictor.attributes() {
        let mut errors = Vec::new();
        for r in records {
            let Some(actual) = r.value(attribute) else { continue };
            let key = r.key();
            if actual == 0.0 {
                return Err(PredictorError::Eval(format!("{attribute} is zero for {key}")));
            }
            let predicted = predictor.predict(attribute, &variants[&key.variant_id()], key.bs)?;
            let ape = 100.0 * (predicted - actual).abs() / actual;
            errors.push(RecordError { key, actual, predicted, ape });
        }
        report.attributes.insert(attribute, AttributeReport::from_records(errors));
    }
    Ok(report)
}
