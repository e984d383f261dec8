//! Synthetic device for tests and demonstrations.
//!
//! **Not a model of any real hardware.** Each attribute is a fixed affine
//! combination of a few analytical features, multiplied by `1 + u` with `u`
//! uniform in `[-noise, noise]`. The noise draw is a pure function of the
//! device seed, the attribute and the record key, so generated datasets are
//! reproducible and independent of generation order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, DatasetError, NetworkLibrary, ProfileRecord, ProfilingPlan, RecordKey};
use crate::features::{elements_to_megabytes, extract_features, FeatureSchema, FeatureVector};
use crate::network::NetworkSpec;
use crate::predictor::{AttributePredictor, PredictorError};

/// How a feature enters an affine term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Unit {
    /// Element count converted to MiB.
    Megabytes,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTerm {
    pub feature: String,
    pub coefficient: f64,
    pub unit: Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineModel {
    pub intercept: f64,
    pub terms: Vec<AffineTerm>,
}

impl AffineModel {
    fn term(feature: &str, coefficient: f64, unit: Unit) -> AffineTerm {
        AffineTerm { feature: feature.into(), coefficient, unit }
    }

    pub fn evaluate(&self, features: &FeatureVector<f64>) -> f64 {
        self.terms.iter().fold(self.intercept, |acc, t| {
            let raw = *features.get(&t.feature).unwrap_or_else(|| panic!("unknown feature {}", t.feature));
            let x = match t.unit {
                Unit::Megabytes => elements_to_megabytes(raw),
                Unit::Raw => raw,
            };
            acc + t.coefficient * x
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDevice {
    pub gamma: AffineModel,
    pub phi: AffineModel,
    pub small_gamma: AffineModel,
    pub small_phi: AffineModel,
    /// Relative noise amplitude per attribute.
    pub noise: [f64; 4],
    pub seed: u64,
    /// Emit inference columns as well.
    pub inference: bool,
}

impl Default for SyntheticDevice {
    fn default() -> Self {
        use Unit::*;
        let t = AffineModel::term;
        Self {
            // a large fixed runtime footprint plus weights, gradients and
            // saved activations
            gamma: AffineModel {
                intercept: 1500.0,
                terms: vec![
                    t("mem_w", 4.0, Megabytes),
                    t("mem_ifm_grad", 1.0, Megabytes),
                    t("mem_ofm_grad", 1.0, Megabytes),
                ],
            },
            phi: AffineModel {
                intercept: 25.0,
                terms: vec![t("mm_ops_sum", 2.5e-9, Raw), t("mem_tensors_sum", 0.02, Megabytes)],
            },
            small_gamma: AffineModel {
                intercept: 600.0,
                terms: vec![t("mem_w", 1.0, Megabytes), t("mem_ofm_grad", 0.5, Megabytes)],
            },
            small_phi: AffineModel { intercept: 4.0, terms: vec![t("mm_ops_fwd", 2.5e-9, Raw)] },
            noise: [0.01; 4],
            seed: 0,
            inference: true,
        }
    }
}

fn attribute_index(a: Attribute) -> usize {
    match a {
        Attribute::Gamma => 0,
        Attribute::Phi => 1,
        Attribute::SmallGamma => 2,
        Attribute::SmallPhi => 3,
    }
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl SyntheticDevice {
    pub fn with_noise(mut self, attribute: Attribute, noise: f64) -> Self {
        self.noise[attribute_index(attribute)] = noise;
        self
    }

    pub fn model(&self, attribute: Attribute) -> &AffineModel {
        match attribute {
            Attribute::Gamma => &self.gamma,
            Attribute::Phi => &self.phi,
            Attribute::SmallGamma => &self.small_gamma,
            Attribute::SmallPhi => &self.small_phi,
        }
    }

    /// Noise-free value.
    pub fn ideal(&self, attribute: Attribute, net: &NetworkSpec, bs: u32) -> Result<f64, DatasetError> {
        let features = extract_features::<f64>(net, bs, FeatureSchema::TRAINING)?;
        Ok(self.model(attribute).evaluate(&features))
    }

    fn noise_factor(&self, attribute: Attribute, key: &RecordKey) -> f64 {
        let amplitude = self.noise[attribute_index(attribute)];
        if amplitude == 0.0 {
            return 1.0;
        }
        let text = format!("{}|{}|{}", self.seed, attribute.column(), key);
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()));
        1.0 + rng.gen_range(-amplitude..=amplitude)
    }

    /// One noisy measurement of the variant `net` identified by `key`.
    pub fn measure(&self, net: &NetworkSpec, key: &RecordKey) -> Result<ProfileRecord, DatasetError> {
        let features = extract_features::<f64>(net, key.bs, FeatureSchema::TRAINING)?;
        let value = |a: Attribute| self.model(a).evaluate(&features) * self.noise_factor(a, key);
        Ok(ProfileRecord {
            network: key.network.clone(),
            pruning_level: key.pruning_level,
            strategy: key.strategy.clone(),
            seed: key.seed,
            bs: key.bs,
            gamma_mb: value(Attribute::Gamma),
            phi_ms: value(Attribute::Phi),
            small_gamma_mb: self.inference.then(|| value(Attribute::SmallGamma)),
            small_phi_ms: self.inference.then(|| value(Attribute::SmallPhi)),
        })
    }

    /// Measure every plan entry, in plan order.
    pub fn run_plan(&self, plan: &ProfilingPlan, library: &NetworkLibrary) -> Result<Vec<ProfileRecord>, DatasetError> {
        let mut variants: HashMap<String, NetworkSpec> = HashMap::new();
        plan.entries()
            .iter()
            .map(|key| {
                let id = key.variant_id();
                if !variants.contains_key(&id) {
                    variants.insert(id.clone(), library.variant(key)?);
                }
                self.measure(&variants[&id], key)
            })
            .collect()
    }
}

impl AttributePredictor for SyntheticDevice {
    fn attributes(&self) -> Vec<Attribute> {
        if self.inference {
            Attribute::ALL.to_vec()
        } else {
            vec![Attribute::Gamma, Attribute::Phi]
        }
    }

    fn predict(&self, attribute: Attribute, net: &NetworkSpec, bs: u32) -> Result<f64, PredictorError> {
        Ok(self.ideal(attribute, net, bs)?)
    }

    fn lower_bound(&self, attribute: Attribute) -> Option<f64> {
        let m = self.model(attribute);
        m.terms.iter().all(|t| t.coefficient >= 0.0).then_some(m.intercept)
    }
}
