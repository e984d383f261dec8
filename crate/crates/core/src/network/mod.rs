//! Network intermediate representation.
//!
//! A network is an ordered list of nodes (convolution layers and opaque
//! shape transforms such as pooling or residual merges) plus channel
//! dependency edges. Each convolution carries its own input spatial size, so
//! features of one layer never depend on any other layer.

mod json;
mod prune;
pub mod zoo;

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{parse_network, to_json};
pub use prune::{prune_network, prune_with_levels, PruneConfig, PruneStrategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error ({rule}) at `{layer}`: {detail}")]
    Validation { rule: Rule, layer: String, detail: String },
    #[error("prune error: {0}")]
    Prune(String),
}

impl NetworkError {
    fn invalid(rule: Rule, layer: &str, detail: impl Into<String>) -> Self {
        NetworkError::Validation { rule, layer: layer.to_string(), detail: detail.into() }
    }

    /// The violated rule, for validation errors.
    pub fn rule(&self) -> Option<Rule> {
        match self {
            NetworkError::Validation { rule, .. } => Some(*rule),
            _ => None,
        }
    }
}

/// Structural rules a [`NetworkSpec`] must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    PositiveField,
    GroupDivisibility,
    ValidWindow,
    UniqueId,
    UnknownEndpoint,
    DuplicateEdge,
    Acyclic,
    MergeMode,
    ChannelConsistency,
    InputChannels,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::PositiveField => "positive field",
            Rule::GroupDivisibility => "group divisibility",
            Rule::ValidWindow => "valid window",
            Rule::UniqueId => "unique layer id",
            Rule::UnknownEndpoint => "unknown edge endpoint",
            Rule::DuplicateEdge => "duplicate edge",
            Rule::Acyclic => "acyclic",
            Rule::MergeMode => "merge mode",
            Rule::ChannelConsistency => "channel consistency",
            Rule::InputChannels => "input channels",
        })
    }
}

/// One convolution layer: `n` filters of shape `(m / g) × k × k` applied with
/// stride `s` and padding `p` to a square `ip × ip` input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub id: String,
    pub n: u32,
    pub m: u32,
    pub k: u32,
    pub s: u32,
    pub p: u32,
    pub g: u32,
    pub ip: u32,
}

impl ConvLayerSpec {
    pub fn new(id: impl Into<String>, n: u32, m: u32, k: u32, s: u32, p: u32, g: u32, ip: u32) -> Self {
        Self { id: id.into(), n, m, k, s, p, g, ip }
    }

    /// Output spatial size, `1 + floor((ip + 2p - k) / s)`.
    pub fn ofm_size(&self) -> u32 {
        1 + (self.ip + 2 * self.p - self.k) / self.s
    }

    /// Depthwise-style layer whose filter count is tied to its input channels.
    pub fn is_channel_tied(&self) -> bool {
        self.g > 1 && self.g == self.m
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let id = self.id.as_str();
        for (name, v) in [("n", self.n), ("m", self.m), ("k", self.k), ("s", self.s), ("g", self.g), ("ip", self.ip)] {
            if v == 0 {
                return Err(NetworkError::invalid(Rule::PositiveField, id, format!("{name} must be >= 1")));
            }
        }
        if self.m % self.g != 0 || self.n % self.g != 0 {
            return Err(NetworkError::invalid(
                Rule::GroupDivisibility,
                id,
                format!("m={} and n={} must both be divisible by g={}", self.m, self.n, self.g),
            ));
        }
        if self.k > self.ip + 2 * self.p {
            return Err(NetworkError::invalid(
                Rule::ValidWindow,
                id,
                format!("k={} exceeds padded input {}", self.k, self.ip + 2 * self.p),
            ));
        }
        Ok(())
    }
}

/// Output spatial size of a convolution layer.
pub fn ofm_size(layer: &ConvLayerSpec) -> u32 {
    layer.ofm_size()
}

/// Non-convolution node (pooling, normalisation, residual add, concat).
/// With incoming edges it preserves the merged channel count of its producers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeNode {
    pub id: String,
    pub out_channels: u32,
    pub out_spatial: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv(ConvLayerSpec),
    Shape(ShapeNode),
}

impl Layer {
    pub fn id(&self) -> &str {
        match self {
            Layer::Conv(c) => &c.id,
            Layer::Shape(s) => &s.id,
        }
    }

    pub fn out_channels(&self) -> u32 {
        match self {
            Layer::Conv(c) => c.n,
            Layer::Shape(s) => s.out_channels,
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayerSpec> {
        match self {
            Layer::Conv(c) => Some(c),
            Layer::Shape(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Passthrough,
    Concat,
    Add,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Passthrough => "passthrough",
            MergeMode::Concat => "concat",
            MergeMode::Add => "add",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub mode: MergeMode,
}

impl Edge {
    pub fn new(from: impl Into<String>, to: impl Into<String>, mode: MergeMode) -> Self {
        Self { from: from.into(), to: to.into(), mode }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: u32,
    pub spatial: u32,
}

/// A validated network. Construction checks every structural invariant, so
/// any value of this type is internally consistent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    name: String,
    input: InputShape,
    layers: Vec<Layer>,
    edges: Vec<Edge>,
    // producers[i] = (node index, mode) for every edge into node i, in edge order
    producers: Vec<Vec<(usize, MergeMode)>>,
    topo: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(
        name: impl Into<String>,
        input: InputShape,
        layers: Vec<Layer>,
        edges: Vec<Edge>,
    ) -> Result<Self, NetworkError> {
        let name = name.into();
        if input.channels == 0 || input.spatial == 0 {
            return Err(NetworkError::invalid(Rule::PositiveField, &name, "input shape must be positive"));
        }

        let mut index = HashMap::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => c.validate()?,
                Layer::Shape(s) => {
                    if s.out_channels == 0 || s.out_spatial == 0 {
                        return Err(NetworkError::invalid(Rule::PositiveField, &s.id, "shape outputs must be >= 1"));
                    }
                }
            }
            if index.insert(layer.id(), i).is_some() {
                return Err(NetworkError::invalid(Rule::UniqueId, layer.id(), "layer id appears more than once"));
            }
        }

        let mut producers: Vec<Vec<(usize, MergeMode)>> = vec![Vec::new(); layers.len()];
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            let from = *index
                .get(e.from.as_str())
                .ok_or_else(|| NetworkError::invalid(Rule::UnknownEndpoint, &e.from, format!("edge {} -> {}", e.from, e.to)))?;
            let to = *index
                .get(e.to.as_str())
                .ok_or_else(|| NetworkError::invalid(Rule::UnknownEndpoint, &e.to, format!("edge {} -> {}", e.from, e.to)))?;
            if !seen.insert((from, to)) {
                return Err(NetworkError::invalid(Rule::DuplicateEdge, &e.to, format!("edge {} -> {}", e.from, e.to)));
            }
            producers[to].push((from, e.mode));
        }

        let topo = topological_order(&layers, &producers)?;

        let net = Self { name, input, layers, edges, producers, topo };
        for i in 0..net.layers.len() {
            net.check_channels(i)?;
        }
        Ok(net)
    }

    /// Channel count entering node `i` from its producers, or `None` for a root.
    fn merged_input_channels(&self, i: usize) -> Result<Option<u32>, NetworkError> {
        let ins = &self.producers[i];
        let Some(&(_, mode)) = ins.first() else {
            return Ok(None);
        };
        let id = self.layers[i].id();
        if ins.iter().any(|&(_, m)| m != mode) {
            return Err(NetworkError::invalid(Rule::MergeMode, id, "incoming edges mix merge modes"));
        }
        let counts: Vec<u32> = ins.iter().map(|&(j, _)| self.layers[j].out_channels()).collect();
        match mode {
            MergeMode::Passthrough => {
                if ins.len() != 1 {
                    return Err(NetworkError::invalid(
                        Rule::MergeMode,
                        id,
                        format!("passthrough expects one producer, found {}", ins.len()),
                    ));
                }
                Ok(Some(counts[0]))
            }
            MergeMode::Concat => Ok(Some(counts.iter().sum())),
            MergeMode::Add => {
                if counts.iter().any(|&c| c != counts[0]) {
                    return Err(NetworkError::invalid(
                        Rule::ChannelConsistency,
                        id,
                        format!("add producers disagree on channels: {counts:?}"),
                    ));
                }
                Ok(Some(counts[0]))
            }
        }
    }

    fn check_channels(&self, i: usize) -> Result<(), NetworkError> {
        let merged = self.merged_input_channels(i)?;
        match (&self.layers[i], merged) {
            (Layer::Conv(c), Some(ch)) if c.m != ch => Err(NetworkError::invalid(
                Rule::ChannelConsistency,
                &c.id,
                format!("m={} but producers supply {ch} channels", c.m),
            )),
            (Layer::Conv(c), None) if c.m != self.input.channels => Err(NetworkError::invalid(
                Rule::InputChannels,
                &c.id,
                format!("m={} but network input has {} channels", c.m, self.input.channels),
            )),
            (Layer::Shape(s), Some(ch)) if s.out_channels != ch => Err(NetworkError::invalid(
                Rule::ChannelConsistency,
                &s.id,
                format!("out_channels={} but producers supply {ch} channels", s.out_channels),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Convolution layers in declaration order.
    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayerSpec> + '_ {
        self.layers.iter().filter_map(Layer::as_conv)
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id() == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id() == id)
    }

    /// Node indices in a deterministic topological order (ties by position).
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub(crate) fn producers_of(&self, i: usize) -> &[(usize, MergeMode)] {
        &self.producers[i]
    }

    /// Same topology under a different name.
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self { name: name.into(), ..self.clone() }
    }

    /// Replace the nodes and edges, revalidating everything.
    pub fn rebuild(&self, layers: Vec<Layer>, edges: Vec<Edge>) -> Result<Self, NetworkError> {
        Self::new(self.name.clone(), self.input, layers, edges)
    }

    /// Total weight parameter count, `Σ n·(m/g)·k²`.
    pub fn weight_count(&self) -> u64 {
        self.conv_layers()
            .map(|c| c.n as u64 * (c.m / c.g) as u64 * (c.k as u64).pow(2))
            .sum()
    }

    /// Out-channel count per node id.
    pub fn channel_map(&self) -> BTreeMap<&str, u32> {
        self.layers.iter().map(|l| (l.id(), l.out_channels())).collect()
    }
}

fn topological_order(layers: &[Layer], producers: &[Vec<(usize, MergeMode)>]) -> Result<Vec<usize>, NetworkError> {
    let n = layers.len();
    let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
    let mut consumers = vec![Vec::new(); n];
    for (to, ins) in producers.iter().enumerate() {
        for &(from, _) in ins {
            consumers[from].push(to);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).expect("cycle member");
        return Err(NetworkError::invalid(Rule::Acyclic, layers[stuck].id(), "dependency graph has a cycle"));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, n: u32, m: u32) -> Layer {
        Layer::Conv(ConvLayerSpec::new(id, n, m, 3, 1, 1, 1, 8))
    }

    fn input(ch: u32) -> InputShape {
        InputShape { channels: ch, spatial: 8 }
    }

    #[test]
    fn ofm_size_examples() {
        let l = |ip, k, s, p| ConvLayerSpec::new("x", 1, 1, k, s, p, 1, ip);
        assert_eq!(l(32, 1, 1, 0).ofm_size(), 32);
        assert_eq!(l(224, 7, 2, 3).ofm_size(), 112);
        assert_eq!(l(4, 2, 1, 0).ofm_size(), 3);
    }

    #[test]
    fn ofm_size_matches_window_enumeration() {
        for ip in 1..=16u32 {
            for k in 1..=5u32 {
                for s in 1..=3u32 {
                    for p in 0..=2u32 {
                        if k > ip + 2 * p {
                            continue;
                        }
                        let padded = ip + 2 * p;
                        let windows = (0..padded).step_by(s as usize).filter(|&start| start + k <= padded).count();
                        let layer = ConvLayerSpec::new("x", 1, 1, k, s, p, 1, ip);
                        assert_eq!(layer.ofm_size() as usize, windows, "ip={ip} k={k} s={s} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let err = NetworkSpec::new(
            "t",
            input(3),
            vec![conv("a", 64, 3), conv("b", 16, 32)],
            vec![Edge::new("a", "b", MergeMode::Passthrough)],
        )
        .unwrap_err();
        assert_eq!(err.rule(), Some(Rule::ChannelConsistency));
        assert!(matches!(err, NetworkError::Validation { ref layer, .. } if layer == "b"));
    }

    #[test]
    fn rejects_cycles_and_unknown_endpoints() {
        let err = NetworkSpec::new(
            "t",
            input(4),
            vec![conv("a", 4, 4), conv("b", 4, 4)],
            vec![Edge::new("a", "b", MergeMode::Passthrough), Edge::new("b", "a", MergeMode::Passthrough)],
        )
        .unwrap_err();
        assert_eq!(err.rule(), Some(Rule::Acyclic));

        let err = NetworkSpec::new("t", input(4), vec![conv("a", 4, 4)], vec![Edge::new("a", "zz", MergeMode::Passthrough)])
            .unwrap_err();
        assert_eq!(err.rule(), Some(Rule::UnknownEndpoint));
    }

    #[test]
    fn rejects_bad_layers() {
        let bad_group = Layer::Conv(ConvLayerSpec::new("a", 6, 4, 3, 1, 1, 4, 8));
        assert_eq!(NetworkSpec::new("t", input(4), vec![bad_group], vec![]).unwrap_err().rule(), Some(Rule::GroupDivisibility));
        let too_big = Layer::Conv(ConvLayerSpec::new("a", 4, 4, 5, 1, 0, 1, 4));
        assert_eq!(NetworkSpec::new("t", input(4), vec![too_big], vec![]).unwrap_err().rule(), Some(Rule::ValidWindow));
        assert_eq!(
            NetworkSpec::new("t", input(4), vec![conv("a", 4, 4), conv("a", 4, 4)], vec![]).unwrap_err().rule(),
            Some(Rule::UniqueId)
        );
    }

    #[test]
    fn concat_and_add_merges() {
        let layers = vec![
            conv("a", 8, 3),
            conv("b", 8, 3),
            Layer::Shape(ShapeNode { id: "cat".into(), out_channels: 16, out_spatial: 8 }),
            Layer::Shape(ShapeNode { id: "sum".into(), out_channels: 8, out_spatial: 8 }),
            conv("c", 4, 16),
        ];
        let edges = vec![
            Edge::new("a", "cat", MergeMode::Concat),
            Edge::new("b", "cat", MergeMode::Concat),
            Edge::new("a", "sum", MergeMode::Add),
            Edge::new("b", "sum", MergeMode::Add),
            Edge::new("cat", "c", MergeMode::Passthrough),
        ];
        let net = NetworkSpec::new("t", input(3), layers, edges).unwrap();
        assert_eq!(net.conv_layers().count(), 3);
        assert_eq!(net.topological_order().len(), 5);
    }
}
