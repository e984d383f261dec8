//! Bundled reference topologies (convolution layers plus the pooling and
//! merge nodes needed to express their channel dependencies).

use super::{parse_network, NetworkSpec};

const BUNDLED: &[(&str, &str)] = &[
    ("resnet18", include_str!("../../data/resnet18.json")),
    ("mobilenetv2", include_str!("../../data/mobilenetv2.json")),
    ("squeezenet", include_str!("../../data/squeezenet.json")),
    ("mnasnet", include_str!("../../data/mnasnet.json")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(name, _)| *name)
}

/// Raw JSON text of a bundled network.
pub fn bundled_json(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn bundled(name: &str) -> Option<NetworkSpec> {
    bundled_json(name).map(|text| parse_network(text).expect("bundled network is valid"))
}
