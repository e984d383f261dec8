//! Descriptor-level structured pruning.
//!
//! Pruning only decides how many filters survive in each layer; which
//! filters are removed is irrelevant because every analytical feature is a
//! function of tensor shapes. Removed channels are propagated to consumers so
//! the result is again a valid [`NetworkSpec`].
//!
//! Layers whose outputs are merged by an element-wise add must keep equal
//! channel counts, so they are pruned as one coupled class driven by the
//! earliest layer of the class. Depthwise layers (`g == m`) follow their
//! input channel count instead of being pruned directly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ConvLayerSpec, Layer, MergeMode, NetworkError, NetworkSpec, ShapeNode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PruneStrategy {
    /// Every layer loses the same fraction of filters.
    UniformRandom,
    /// Per-layer level is `level · w / mean(w)`; layers absent from the map
    /// have weight 1.
    LayerWeighted(BTreeMap<String, f64>),
}

impl PruneStrategy {
    /// Weights increasing with depth, so deeper layers lose more filters.
    /// Stands in for magnitude (L1-norm) pruning, which needs weight values.
    pub fn depth_weighted(net: &NetworkSpec) -> Self {
        PruneStrategy::LayerWeighted(
            prunable_convs(net)
                .enumerate()
                .map(|(depth, c)| (c.id.clone(), (depth + 1) as f64))
                .collect(),
        )
    }

    /// Strategy named by a dataset/plan tag: `random` or `l1approx`.
    pub fn from_tag(tag: &str, net: &NetworkSpec) -> Result<Self, NetworkError> {
        match tag {
            "random" => Ok(PruneStrategy::UniformRandom),
            "l1approx" => Ok(PruneStrategy::depth_weighted(net)),
            other => Err(NetworkError::Prune(format!("unknown pruning strategy tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Percentage of filters to remove, in `[0, 100)`.
    pub level: f64,
    pub strategy: PruneStrategy,
    /// Kept for provenance: surviving counts do not depend on which filters
    /// are removed, so the seed never changes the resulting descriptor.
    pub seed: u64,
}

impl PruneConfig {
    pub fn uniform(level: f64) -> Self {
        Self { level, strategy: PruneStrategy::UniformRandom, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.level.is_finite() && (0.0..100.0).contains(&self.level)) {
            return Err(NetworkError::Prune(format!("pruning level {} outside [0, 100)", self.level)));
        }
        if let PruneStrategy::LayerWeighted(weights) = &self.strategy {
            if let Some((id, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
                return Err(NetworkError::Prune(format!("weight {w} for `{id}` must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn prunable_convs(net: &NetworkSpec) -> impl Iterator<Item = &ConvLayerSpec> {
    net.conv_layers().filter(|c| !c.is_channel_tied())
}

/// Prune `net` according to `cfg`.
pub fn prune_network(net: &NetworkSpec, cfg: &PruneConfig) -> Result<NetworkSpec, NetworkError> {
    cfg.validate()?;
    let levels: BTreeMap<String, f64> = match &cfg.strategy {
        PruneStrategy::UniformRandom => prunable_convs(net).map(|c| (c.id.clone(), cfg.level)).collect(),
        PruneStrategy::LayerWeighted(weights) => {
            if let Some(id) = weights.keys().find(|id| net.layer(id).is_none()) {
                return Err(NetworkError::Prune(format!("weight references unknown layer `{id}`")));
            }
            let ws: Vec<(&str, f64)> = prunable_convs(net)
                .map(|c| (c.id.as_str(), weights.get(&c.id).copied().unwrap_or(1.0)))
                .collect();
            let mean = ws.iter().map(|(_, w)| w).sum::<f64>() / ws.len().max(1) as f64;
            ws.into_iter()
                .map(|(id, w)| {
                    let level = if mean > 0.0 { (cfg.level * w / mean).clamp(0.0, 100.0) } else { 0.0 };
                    (id.to_string(), level)
                })
                .collect()
        }
    };
    prune_with_levels(net, &levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    /// Filter count chosen by pruning.
    Prunable,
    /// Root node whose channel count cannot change.
    Fixed,
    /// Output equals the single (or add-merged) input.
    Preserving,
    /// Output computed from a concatenation or a depthwise multiplier.
    Derived,
}

fn kind_of(layer: &Layer, producers: &[(usize, MergeMode)]) -> Kind {
    let mode = producers.first().map(|&(_, m)| m);
    match layer {
        Layer::Conv(c) if !c.is_channel_tied() => Kind::Prunable,
        Layer::Conv(c) => match mode {
            None => Kind::Fixed,
            Some(MergeMode::Concat) => Kind::Derived,
            Some(_) if c.n != c.m => Kind::Derived,
            Some(_) => Kind::Preserving,
        },
        Layer::Shape(_) => match mode {
            None => Kind::Fixed,
            Some(MergeMode::Concat) => Kind::Derived,
            Some(_) => Kind::Preserving,
        },
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let parent = self.0[i];
        if parent == i {
            return i;
        }
        let root = self.find(parent);
        self.0[i] = root;
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u32, b: u32) -> u32 {
    a / gcd(a, b) * b
}

/// Surviving filter count: round-half-up of `n · (1 − level/100)`, floored at
/// one filter (or at one multiple of `multiple` for grouped layers).
pub(crate) fn surviving_filters(n: u32, level: f64, multiple: u32) -> u32 {
    if level <= 0.0 {
        return n;
    }
    let kept = n as f64 * (100.0 - level) / 100.0;
    let units = (kept / multiple as f64 + 0.5).floor() as u32;
    units.max(1) * multiple
}

/// Prune with an explicit per-layer level (percent). Layers missing from
/// `levels` are left unpruned; depthwise layers ignore their entry.
pub fn prune_with_levels(net: &NetworkSpec, levels: &BTreeMap<String, f64>) -> Result<NetworkSpec, NetworkError> {
    for (id, &level) in levels {
        if net.layer(id).is_none() {
            return Err(NetworkError::Prune(format!("level references unknown layer `{id}`")));
        }
        if !(level.is_finite() && (0.0..=100.0).contains(&level)) {
            return Err(NetworkError::Prune(format!("level {level} for `{id}` outside [0, 100]")));
        }
    }

    let layers = net.layers();
    let count = layers.len();
    let kinds: Vec<Kind> = (0..count).map(|i| kind_of(&layers[i], net.producers_of(i))).collect();

    let mut classes = UnionFind((0..count).collect());
    for i in 0..count {
        let ins = net.producers_of(i);
        if ins.first().map(|&(_, m)| m) == Some(MergeMode::Add) {
            for w in ins.windows(2) {
                classes.union(w[0].0, w[1].0);
            }
        }
        if kinds[i] == Kind::Preserving {
            classes.union(i, ins[0].0);
        }
    }
    let class: Vec<usize> = (0..count).map(|i| classes.find(i)).collect();

    let mut leader_level = vec![None::<f64>; count];
    let mut fixed_value = vec![None::<u32>; count];
    let mut derived_member = vec![None::<usize>; count];
    for i in 0..count {
        let c = class[i];
        match kinds[i] {
            Kind::Prunable if leader_level[c].is_none() => {
                leader_level[c] = Some(levels.get(layers[i].id()).copied().unwrap_or(0.0));
            }
            Kind::Fixed if fixed_value[c].is_none() => fixed_value[c] = Some(layers[i].out_channels()),
            Kind::Derived if derived_member[c].is_none() => derived_member[c] = Some(i),
            _ => {}
        }
    }
    // grouped (non-depthwise) layers need channel counts divisible by g
    fn collect(net: &NetworkSpec, kinds: &[Kind], class: &[usize], node: usize, out: &mut BTreeSet<usize>) {
        if kinds[node] == Kind::Derived {
            for &(p, _) in net.producers_of(node) {
                collect(net, kinds, class, p, out);
            }
        } else {
            out.insert(class[node]);
        }
    }
    let mut requirements: Vec<(u32, BTreeSet<usize>)> = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        if let Layer::Conv(c) = layer {
            if c.g > 1 && !c.is_channel_tied() {
                let mut set = BTreeSet::new();
                collect(net, &kinds, &class, i, &mut set);
                for &(p, _) in net.producers_of(i) {
                    collect(net, &kinds, &class, p, &mut set);
                }
                requirements.push((c.g, set));
            }
        }
    }
    // a prunable class add-coupled to a concatenation must match its sum
    for i in 0..count {
        if kinds[i] == Kind::Prunable {
            if let Some(d) = derived_member[class[i]] {
                let mut set = BTreeSet::from([class[i]]);
                collect(net, &kinds, &class, d, &mut set);
                for &(p, _) in net.producers_of(d) {
                    collect(net, &kinds, &class, p, &mut set);
                }
                requirements.push((1, set));
            }
        }
    }
    let mut multiple = vec![1u32; count];
    for (g, set) in &requirements {
        for &c in set {
            multiple[c] = lcm(multiple[c], *g);
        }
    }
    // a class whose width is not a multiple of its requirement stays
    // unpruned, and so does every class it shares a grouped layer with
    let mut frozen = vec![false; count];
    for i in 0..count {
        if kinds[i] == Kind::Prunable && derived_member[class[i]].is_some() {
            frozen[class[i]] = true;
        }
        if matches!(kinds[i], Kind::Prunable | Kind::Fixed) && layers[i].out_channels() % multiple[class[i]] != 0 {
            frozen[class[i]] = true;
        }
    }
    loop {
        let mut changed = false;
        for (_, set) in &requirements {
            if set.iter().any(|&c| frozen[c]) {
                for &c in set {
                    changed |= !std::mem::replace(&mut frozen[c], true);
                }
            }
        }
        if !changed {
            break;
        }
    }
    for c in 0..count {
        if frozen[c] {
            leader_level[c] = leader_level[c].map(|_| 0.0);
            multiple[c] = 1;
        }
    }

    let mut new_out = vec![0u32; count];
    let mut new_in = vec![None::<u32>; count];
    let mut class_value = vec![None::<u32>; count];
    for &i in net.topological_order() {
        let ins = net.producers_of(i);
        let input = match ins.first().map(|&(_, m)| m) {
            None => None,
            Some(MergeMode::Concat) => Some(ins.iter().map(|&(p, _)| new_out[p]).sum()),
            Some(_) => Some(new_out[ins[0].0]),
        };
        new_in[i] = input;
        let c = class[i];
        let out = match kinds[i] {
            Kind::Prunable => class_value[c].or(fixed_value[c]).unwrap_or_else(|| {
                surviving_filters(layers[i].out_channels(), leader_level[c].unwrap_or(0.0), multiple[c])
            }),
            Kind::Fixed => layers[i].out_channels(),
            Kind::Preserving => input.expect("preserving node has a producer"),
            Kind::Derived => {
                let input = input.expect("derived node has producers");
                match &layers[i] {
                    Layer::Conv(conv) => input * (conv.n / conv.m),
                    Layer::Shape(_) => input,
                }
            }
        };
        if let Some(v) = class_value[c] {
            if v != out {
                return Err(NetworkError::Prune(format!(
                    "coupled channels disagree at `{}` ({out} vs {v})",
                    layers[i].id()
                )));
            }
        }
        class_value[c] = Some(out);
        new_out[i] = out;
    }

    let pruned: Vec<Layer> = layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer {
            Layer::Conv(conv) => {
                let m = new_in[i].unwrap_or(conv.m);
                let g = if conv.is_channel_tied() { m } else { conv.g };
                Layer::Conv(ConvLayerSpec { n: new_out[i], m, g, ..conv.clone() })
            }
            Layer::Shape(s) => Layer::Shape(ShapeNode { out_channels: new_out[i], ..s.clone() }),
        })
        .collect();
    net.rebuild(pruned, net.edges().to_vec())
        .map_err(|e| NetworkError::Prune(format!("pruned network is invalid: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{zoo, Edge, InputShape};

    fn chain() -> NetworkSpec {
        NetworkSpec::new(
            "chain",
            InputShape { channels: 3, spatial: 16 },
            vec![
                Layer::Conv(ConvLayerSpec::new("a", 64, 3, 3, 1, 1, 1, 16)),
                Layer::Conv(ConvLayerSpec::new("b", 128, 64, 3, 1, 1, 1, 16)),
            ],
            vec![Edge::new("a", "b", MergeMode::Passthrough)],
        )
        .unwrap()
    }

    fn conv<'a>(net: &'a NetworkSpec, id: &str) -> &'a ConvLayerSpec {
        net.layer(id).and_then(Layer::as_conv).unwrap()
    }

    #[test]
    fn zero_level_is_identity() {
        for name in zoo::bundled_names() {
            let net = zoo::bundled(name).unwrap();
            assert_eq!(prune_network(&net, &PruneConfig::uniform(0.0)).unwrap(), net);
        }
    }

    #[test]
    fn single_layer_half() {
        let net = NetworkSpec::new(
            "one",
            InputShape { channels: 3, spatial: 8 },
            vec![Layer::Conv(ConvLayerSpec::new("a", 64, 3, 3, 1, 1, 1, 8))],
            vec![],
        )
        .unwrap();
        let pruned = prune_network(&net, &PruneConfig::uniform(50.0)).unwrap();
        assert_eq!(conv(&pruned, "a").n, 32);
    }

    #[test]
    fn chain_propagates_to_consumer() {
        let pruned = prune_network(&chain(), &PruneConfig::uniform(50.0)).unwrap();
        assert_eq!(conv(&pruned, "a").n, 32);
        assert_eq!(conv(&pruned, "b").m, 32);
        assert_eq!(conv(&pruned, "b").n, 64);
    }

    #[test]
    fn rounding_is_half_up_with_floor_of_one() {
        assert_eq!(surviving_filters(3, 50.0, 1), 2);
        assert_eq!(surviving_filters(64, 30.0, 1), 45);
        assert_eq!(surviving_filters(10, 15.0, 1), 9);
        assert_eq!(surviving_filters(1, 95.0, 1), 1);
        assert_eq!(surviving_filters(2, 99.0, 1), 1);
        assert_eq!(surviving_filters(12, 50.0, 4), 8);
    }

    #[test]
    fn residual_adds_stay_consistent() {
        let net = zoo::bundled("resnet18").unwrap();
        let pruned = prune_network(&net, &PruneConfig::uniform(50.0)).unwrap();
        assert_eq!(conv(&pruned, "conv1").n, 32);
        assert_eq!(conv(&pruned, "layer1.0.conv2").n, 32);
        assert_eq!(conv(&pruned, "layer4.1.conv1").m, 256);
    }

    #[test]
    fn depthwise_follows_input() {
        let net = zoo::bundled("mobilenetv2").unwrap();
        let pruned = prune_network(&net, &PruneConfig::uniform(30.0)).unwrap();
        let expand = conv(&pruned, "features.2.expand");
        let dw = conv(&pruned, "features.2.dw");
        assert_eq!(dw.m, expand.n);
        assert_eq!(dw.g, dw.m);
        assert_eq!(dw.n, dw.m);
    }

    #[test]
    fn weighted_prunes_deeper_layers_more() {
        let net = chain();
        let cfg = PruneConfig { level: 40.0, strategy: PruneStrategy::depth_weighted(&net), seed: 0 };
        let pruned = prune_network(&net, &cfg).unwrap();
        // weights 1 and 2, mean 1.5: levels 26.7% and 53.3%
        assert_eq!(conv(&pruned, "a").n, 47);
        assert_eq!(conv(&pruned, "b").n, 60);
    }

    #[test]
    fn weighted_rejects_unknown_layer() {
        let cfg = PruneConfig {
            level: 10.0,
            strategy: PruneStrategy::LayerWeighted([("nope".to_string(), 1.0)].into()),
            seed: 0,
        };
        assert!(matches!(prune_network(&chain(), &cfg), Err(NetworkError::Prune(_))));
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(prune_network(&chain(), &PruneConfig::uniform(100.0)).is_err());
        assert!(prune_network(&chain(), &PruneConfig::uniform(-1.0)).is_err());
    }

    #[test]
    fn grouped_layers_round_to_group_multiple() {
        let net = NetworkSpec::new(
            "grouped",
            InputShape { channels: 8, spatial: 8 },
            vec![
                Layer::Conv(ConvLayerSpec::new("a", 16, 8, 3, 1, 1, 4, 8)),
                Layer::Conv(ConvLayerSpec::new("b", 12, 16, 3, 1, 1, 4, 8)),
            ],
            vec![Edge::new("a", "b", MergeMode::Passthrough)],
        )
        .unwrap();
        let pruned = prune_network(&net, &PruneConfig::uniform(35.0)).unwrap();
        let (a, b) = (conv(&pruned, "a"), conv(&pruned, "b"));
        assert_eq!(a.n % 4, 0);
        assert_eq!(b.n % 4, 0);
        assert_eq!(b.m, a.n);
        assert_eq!((a.g, b.g), (4, 4));
    }

    #[test]
    fn seed_does_not_change_counts() {
        let net = zoo::bundled("squeezenet").unwrap();
        let a = prune_network(&net, &PruneConfig { seed: 1, ..PruneConfig::uniform(70.0) }).unwrap();
        let b = prune_network(&net, &PruneConfig { seed: 2, ..PruneConfig::uniform(70.0) }).unwrap();
        assert_eq!(a, b);
    }

    fn concat_of_odd_widths(tail: Layer, extra: Vec<Edge>) -> NetworkSpec {
        let mut edges = vec![Edge::new("a", "cat", MergeMode::Concat), Edge::new("b", "cat", MergeMode::Concat)];
        edges.extend(extra);
        NetworkSpec::new(
            "cat",
            InputShape { channels: 4, spatial: 8 },
            vec![
                Layer::Conv(ConvLayerSpec::new("a", 5, 4, 3, 1, 1, 1, 8)),
                Layer::Conv(ConvLayerSpec::new("b", 7, 4, 3, 1, 1, 1, 8)),
                Layer::Shape(ShapeNode { id: "cat".into(), out_channels: 12, out_spatial: 8 }),
                tail,
            ],
            edges,
        )
        .unwrap()
    }

    #[test]
    fn grouped_layer_over_indivisible_concat_keeps_producers() {
        let net = concat_of_odd_widths(
            Layer::Conv(ConvLayerSpec::new("g", 8, 12, 3, 1, 1, 4, 8)),
            vec![Edge::new("cat", "g", MergeMode::Passthrough)],
        );
        let pruned = prune_network(&net, &PruneConfig::uniform(60.0)).unwrap();
        let widths: Vec<(u32, u32)> = pruned.conv_layers().map(|c| (c.n, c.m)).collect();
        assert_eq!(widths, [(5, 4), (7, 4), (8, 12)]);
    }

    #[test]
    fn add_coupled_to_concat_stays_unpruned() {
        let mut net = concat_of_odd_widths(Layer::Conv(ConvLayerSpec::new("d", 12, 4, 1, 1, 0, 1, 8)), vec![]);
        let mut layers = net.layers().to_vec();
        layers.push(Layer::Shape(ShapeNode { id: "sum".into(), out_channels: 12, out_spatial: 8 }));
        let mut edges = net.edges().to_vec();
        edges.extend([Edge::new("cat", "sum", MergeMode::Add), Edge::new("d", "sum", MergeMode::Add)]);
        net = net.rebuild(layers, edges).unwrap();
        let pruned = prune_network(&net, &PruneConfig::uniform(50.0)).unwrap();
        assert_eq!(pruned, net);
    }
}
