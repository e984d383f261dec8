//! Measurement records, profiling plans, and the join of measurements with
//! extracted features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_features, FeatureError, FeatureSchema};
use crate::network::{prune_network, NetworkError, NetworkSpec, PruneConfig, PruneStrategy};

pub const DATASET_HEADER: [&str; 9] =
    ["network", "pruning_level", "strategy", "seed", "bs", "gamma_mb", "phi_ms", "small_gamma_mb", "small_phi_ms"];

pub const PLAN_HEADER: [&str; 6] = ["network", "pruning_level", "strategy", "seed", "bs", "variant"];

#[derive(Debug, Error)]
pub enum DatasetError {
    /// `row` is 1-based and counts the header as row 1.
    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("join error: {0}")]
    Join(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Predicted performance attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    /// Peak training memory, MB.
    Gamma,
    /// Training latency per mini-batch, ms.
    Phi,
    /// Inference memory, MB.
    SmallGamma,
    /// Inference latency, ms.
    SmallPhi,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Gamma, Attribute::Phi, Attribute::SmallGamma, Attribute::SmallPhi];

    pub fn column(self) -> &'static str {
        match self {
            Attribute::Gamma => "gamma_mb",
            Attribute::Phi => "phi_ms",
            Attribute::SmallGamma => "small_gamma_mb",
            Attribute::SmallPhi => "small_phi_ms",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Attribute::Gamma => "Γ",
            Attribute::Phi => "Φ",
            Attribute::SmallGamma => "γ",
            Attribute::SmallPhi => "φ",
        }
    }

    /// Training attributes see the full feature set; inference attributes
    /// only the forward-pass features.
    pub fn schema(self) -> FeatureSchema {
        match self {
            Attribute::Gamma | Attribute::Phi => FeatureSchema::TRAINING,
            Attribute::SmallGamma | Attribute::SmallPhi => FeatureSchema::INFERENCE,
        }
    }

    pub fn is_inference(self) -> bool {
        matches!(self, Attribute::SmallGamma | Attribute::SmallPhi)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for Attribute {
    type Err = String;

    /// Accepts the symbol, the CSV column, or a plain name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Γ" | "gamma_mb" | "gamma" => Attribute::Gamma,
            "Φ" | "phi_ms" | "phi" => Attribute::Phi,
            "γ" | "small_gamma_mb" | "small_gamma" => Attribute::SmallGamma,
            "φ" | "small_phi_ms" | "small_phi" => Attribute::SmallPhi,
            other => return Err(format!("unknown attribute {other:?} (expected Γ, Φ, γ, φ or a column name)")),
        })
    }
}

/// Identity of a measurement: which variant was run at which batch size.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub network: String,
    pub pruning_level: u32,
    pub strategy: String,
    pub seed: u64,
    pub bs: u32,
}

impl RecordKey {
    /// Identifier of the pruned variant, shared by all batch sizes.
    pub fn variant_id(&self) -> String {
        format!("{}_p{}_{}_s{}", self.network, self.pruning_level, self.strategy, self.seed)
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@bs{}", self.variant_id(), self.bs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub network: String,
    pub pruning_level: u32,
    pub strategy: String,
    pub seed: u64,
    pub bs: u32,
    pub gamma_mb: f64,
    pub phi_ms: f64,
    pub small_gamma_mb: Option<f64>,
    pub small_phi_ms: Option<f64>,
}

impl ProfileRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            network: self.network.clone(),
            pruning_level: self.pruning_level,
            strategy: self.strategy.clone(),
            seed: self.seed,
            bs: self.bs,
        }
    }

    pub fn value(&self, attribute: Attribute) -> Option<f64> {
        match attribute {
            Attribute::Gamma => Some(self.gamma_mb),
            Attribute::Phi => Some(self.phi_ms),
            Attribute::SmallGamma => self.small_gamma_mb,
            Attribute::SmallPhi => self.small_phi_ms,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bs == 0 {
            return Err("bs must be >= 1".into());
        }
        if self.pruning_level >= 100 {
            return Err(format!("pruning_level {} outside [0, 100)", self.pruning_level));
        }
        for attribute in Attribute::ALL {
            if let Some(v) = self.value(attribute) {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(format!("{attribute} = {v} is not a finite non-negative number"));
                }
            }
        }
        if self.small_gamma_mb.is_some() != self.small_phi_ms.is_some() {
            return Err("small_gamma_mb and small_phi_ms must be both present or both empty".into());
        }
        Ok(())
    }
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<ProfileRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| DatasetError::Csv { row: 1, message: e.to_string() })?;
    if header.iter().ne(DATASET_HEADER) {
        return Err(DatasetError::Csv {
            row: 1,
            message: format!("header must be exactly {:?}", DATASET_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ProfileRecord>().enumerate() {
        let row_number = i + 2;
        let record = row.map_err(|e| DatasetError::Csv { row: row_number, message: e.to_string() })?;
        record.validate().map_err(|message| DatasetError::Csv { row: row_number, message })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(output: W, records: &[ProfileRecord]) -> Result<(), DatasetError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(output);
    let csv_err = |row: usize| move |e: csv::Error| DatasetError::Csv { row, message: e.to_string() };
    writer.write_record(DATASET_HEADER).map_err(csv_err(1))?;
    for (i, record) in records.iter().enumerate() {
        record.validate().map_err(|message| DatasetError::Csv { row: i + 2, message })?;
        writer.serialize(record).map_err(csv_err(i + 2))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<ProfileRecord>, DatasetError> {
    read_dataset(File::open(path)?)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[ProfileRecord]) -> Result<(), DatasetError> {
    write_dataset(File::create(path)?, records)
}

/// The 25 profiled batch sizes, ascending from 2 to 256.
pub fn default_batch_sizes() -> Vec<u32> {
    vec![
        2, 4, 8, 16, 32, 64, 70, 80, 90, 100, 110, 120, 128, 140, 150, 160, 170, 180, 190, 200, 210, 220, 230, 240, 256,
    ]
}

/// Pruning levels profiled for training.
pub fn train_levels() -> Vec<u32> {
    vec![0, 30, 50, 70, 90]
}

/// Multiples of 5 in `[0, 90]` not used for training.
pub fn test_levels() -> Vec<u32> {
    let train = train_levels();
    (0..=18).map(|x| 5 * x).filter(|l| !train.contains(l)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfilingPlan {
    entries: Vec<RecordKey>,
}

impl ProfilingPlan {
    pub fn entries(&self) -> &[RecordKey] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct variants in plan order.
    pub fn variants(&self) -> Vec<RecordKey> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|k| seen.insert(k.variant_id()))
            .map(|k| RecordKey { bs: 0, ..k.clone() })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, output: W) -> Result<(), DatasetError> {
        let mut writer = csv::Writer::from_writer(output);
        let csv_err = |e: csv::Error| DatasetError::Plan(e.to_string());
        writer.write_record(PLAN_HEADER).map_err(csv_err)?;
        for k in &self.entries {
            writer
                .write_record([
                    k.network.clone(),
                    k.pruning_level.to_string(),
                    k.strategy.clone(),
                    k.seed.to_string(),
                    k.bs.to_string(),
                    k.variant_id(),
                ])
                .map_err(csv_err)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Cross product of networks × levels × strategies × seeds × batch sizes, in
/// that nesting order. Repeated input values would produce duplicate entries
/// and are rejected.
pub fn generate_plan(
    nets: &[NetworkSpec],
    levels: &[u32],
    strategies: &[String],
    seeds: &[u64],
    batch_sizes: &[u32],
) -> Result<ProfilingPlan, DatasetError> {
    if let Some(l) = levels.iter().find(|&&l| l >= 100) {
        return Err(DatasetError::Plan(format!("pruning level {l} outside [0, 100)")));
    }
    if batch_sizes.is_empty() {
        return Err(DatasetError::Plan("batch size list is empty".into()));
    }
    if batch_sizes.contains(&0) {
        return Err(DatasetError::Plan("batch size 0".into()));
    }
    for net in nets {
        for s in strategies {
            PruneStrategy::from_tag(s, net).map_err(|e| DatasetError::Plan(e.to_string()))?;
        }
    }
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for net in nets {
        for &pruning_level in levels {
            for strategy in strategies {
                for &seed in seeds {
                    for &bs in batch_sizes {
                        let key = RecordKey {
                            network: net.name().to_string(),
                            pruning_level,
                            strategy: strategy.clone(),
                            seed,
                            bs,
                        };
                        if !seen.insert(key.clone()) {
                            return Err(DatasetError::Plan(format!("duplicate plan entry {key}")));
                        }
                        entries.push(key);
                    }
                }
            }
        }
    }
    Ok(ProfilingPlan { entries })
}

/// Reconstruct the pruned variant a record refers to.
pub fn materialize_variant(base: &NetworkSpec, key: &RecordKey) -> Result<NetworkSpec, DatasetError> {
    let strategy = PruneStrategy::from_tag(&key.strategy, base)?;
    let cfg = PruneConfig { level: key.pruning_level as f64, strategy, seed: key.seed };
    Ok(prune_network(base, &cfg)?.renamed(key.variant_id()))
}

/// Base networks addressable by name.
#[derive(Clone, Debug, Default)]
pub struct NetworkLibrary {
    nets: BTreeMap<String, NetworkSpec>,
}

impl NetworkLibrary {
    pub fn new(nets: impl IntoIterator<Item = NetworkSpec>) -> Result<Self, DatasetError> {
        let mut map = BTreeMap::new();
        for net in nets {
            let name = net.name().to_string();
            if map.insert(name.clone(), net).is_some() {
                return Err(DatasetError::Join(format!("network {name:?} given twice")));
            }
        }
        Ok(Self { nets: map })
    }

    pub fn get(&self, name: &str) -> Option<&NetworkSpec> {
        self.nets.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nets.keys().map(String::as_str)
    }

    pub fn variant(&self, key: &RecordKey) -> Result<NetworkSpec, DatasetError> {
        let base = self
            .get(&key.network)
            .ok_or_else(|| DatasetError::Join(format!("record {key} references unknown network {:?}", key.network)))?;
        materialize_variant(base, key)
    }
}

/// Feature rows paired with one target attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub schema: FeatureSchema,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub keys: Vec<RecordKey>,
}

impl DesignMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One row per record carrying `attribute`, in record order. Records
/// without an optional attribute are skipped; if no record carries it the
/// join fails naming the column.
pub fn join(
    records: &[ProfileRecord],
    library: &NetworkLibrary,
    attribute: Attribute,
    schema: FeatureSchema,
) -> Result<DesignMatrix, DatasetError> {
    if !records.is_empty() && records.iter().all(|r| r.value(attribute).is_none()) {
        return Err(DatasetError::Join(format!("no record has a value in column {}", attribute.column())));
    }
    let mut variants: HashMap<String, NetworkSpec> = HashMap::new();
    let mut out = DesignMatrix {
        schema,
        feature_names: schema.names(),
        rows: Vec::new(),
        targets: Vec::new(),
        keys: Vec::new(),
    };
    for record in records {
        let key = record.key();
        let net = match variants.get(&key.variant_id()) {
            Some(net) => net,
            None => {
                let net = library.variant(&key)?;
                variants.entry(key.variant_id()).or_insert(net)
            }
        };
        let Some(target) = record.value(attribute) else { continue };
        out.rows.push(extract_features::<f64>(net, key.bs, schema)?.to_f64());
        out.targets.push(target);
        out.keys.push(key);
    }
    Ok(out)
}
