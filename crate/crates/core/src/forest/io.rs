use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Forest, ForestError, ForestFloat};

pub const FORMAT_NAME: &str = "trainperf-forest";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
#[serde(bound = "F: ForestFloat")]
struct FileOut<'a, F> {
    format: &'static str,
    version: u32,
    checksum: String,
    model: &'a Forest<F>,
}

fn digest(canonical: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(canonical.as_bytes())))
}

fn parse_value(text: &str) -> Result<Value, serde_json::Error> {
    let mut de = serde_json::Deserializer::from_str(text);
    // deep trees nest far past the default recursion limit
    de.disable_recursion_limit();
    let value = Value::deserialize(&mut de)?;
    de.end()?;
    Ok(value)
}

impl<F: ForestFloat> Forest<F> {
    /// Serialise to a self-describing JSON document. Output is a pure
    /// function of the model, so equal models give byte-identical files.
    pub fn to_json(&self) -> String {
        let canonical = serde_json::to_string(self).expect("forest serialises");
        let out = FileOut { format: FORMAT_NAME, version: FORMAT_VERSION, checksum: digest(&canonical), model: self };
        serde_json::to_string(&out).expect("forest serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        let value = parse_value(text).map_err(|e| ForestError::Checksum(format!("unreadable model file: {e}")))?;
        let Value::Object(mut doc) = value else {
            return Err(ForestError::Checksum("model file is not a JSON object".into()));
        };
        let format = doc.get("format").and_then(Value::as_str).unwrap_or("<missing>");
        let version = doc.get("version").and_then(Value::as_u64);
        if format != FORMAT_NAME || version != Some(FORMAT_VERSION as u64) {
            let found = match version {
                Some(v) => format!("{format} v{v}"),
                None => format!("{format} (no version)"),
            };
            return Err(ForestError::Version { found });
        }
        let expected = doc
            .get("checksum")
            .and_then(Value::as_str)
            .ok_or_else(|| ForestError::Checksum("missing checksum".into()))?
            .to_string();
        let model = doc.remove("model").ok_or_else(|| ForestError::Checksum("missing model body".into()))?;
        let forest: Forest<F> =
            serde_json::from_value(model).map_err(|e| ForestError::Checksum(format!("malformed model body: {e}")))?;
        let actual = digest(&serde_json::to_string(&forest).expect("forest serialises"));
        if actual != expected {
            return Err(ForestError::Checksum(format!("expected {expected}, computed {actual}")));
        }
        Ok(forest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ForestError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForestError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ForestConfig;
    use super::*;

    fn small() -> Forest<f64> {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 4) as f64 * 0.1]).collect();
        let y: Vec<f64> = (0..30).map(|i| (i as f64).sqrt() + 0.1).collect();
        Forest::fit(&rows, &y, vec!["a".into(), "b".into()], "y", &ForestConfig { n_trees: 5, ..Default::default() })
            .unwrap()
            .with_feature_set("tag")
    }

    #[test]
    fn round_trip_is_exact() {
        let f = small();
        let back = Forest::<f64>::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_json(), f.to_json());
    }

    #[test]
    fn truncation_is_detected() {
        let text = small().to_json();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Forest::<f64>::from_json(cut), Err(ForestError::Checksum(_))));
    }

    #[test]
    fn tampering_is_detected() {
        let mut doc: Value = serde_json::from_str(&small().to_json()).unwrap();
        doc["model"]["target_name"] = Value::String("z".into());
        let tampered = serde_json::to_string(&doc).unwrap();
        assert!(matches!(Forest::<f64>::from_json(&tampered), Err(ForestError::Checksum(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut doc: Value = serde_json::from_str(&small().to_json()).unwrap();
        doc["version"] = Value::from(99);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(matches!(Forest::<f64>::from_json(&text), Err(ForestError::Version { .. })));
    }

    #[test]
    fn deep_tree_round_trips() {
        // a staircase target forces a chain of splits hundreds deep
        let rows: Vec<Vec<f64>> = (0..400).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let f = Forest::fit(&rows, &y, vec!["x".into()], "y", &ForestConfig::interpolating()).unwrap();
        let back = Forest::<f64>::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
    }
}
