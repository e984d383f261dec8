#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trainperf::network::{ConvLayerSpec, Edge, InputShape, Layer, MergeMode, NetworkSpec, ShapeNode};
use trainperf::search::{Knob, SearchSpace};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn divisors(x: u32) -> Vec<u32> {
    (1..=x).filter(|d| x % d == 0).collect()
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A valid conv layer with ip ≤ 8, k ≤ 3, s ≤ 2, p ≤ 1.
pub fn small_layer(rng: &mut impl Rng, id: &str) -> ConvLayerSpec {
    let ip = rng.gen_range(1..=8);
    let p = rng.gen_range(0..=1);
    let k = rng.gen_range(1..=3.min(ip + 2 * p));
    let s = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=6);
    let g = *divisors(gcd(m, n)).choose(rng).unwrap();
    ConvLayerSpec::new(id, n, m, k, s, p, g, ip)
}

struct Node {
    id: String,
    channels: u32,
    spatial: u32,
}

/// A random valid DAG: convs reading the input or an earlier node, plus
/// concat and add merge nodes.
pub fn random_network(rng: &mut impl Rng, max_nodes: usize) -> NetworkSpec {
    let input = InputShape { channels: rng.gen_range(1..=4), spatial: rng.gen_range(4..=16) };
    let mut nodes: Vec<Node> = Vec::new();
    let mut layers = Vec::new();
    let mut edges = Vec::new();
    let count = rng.gen_range(1..=max_nodes);
    for i in 0..count {
        let id = format!("n{i}");
        let roll: f64 = rng.gen();
        if roll < 0.15 && nodes.len() >= 2 {
            // concat of two or three distinct earlier nodes
            let take = rng.gen_range(2..=3.min(nodes.len()));
            let picks: Vec<usize> = rand::seq::index::sample(rng, nodes.len(), take).into_vec();
            let channels = picks.iter().map(|&j| nodes[j].channels).sum();
            let spatial = nodes[picks[0]].spatial;
            for &j in &picks {
                edges.push(Edge::new(nodes[j].id.clone(), id.clone(), MergeMode::Concat));
            }
            layers.push(Layer::Shape(ShapeNode { id: id.clone(), out_channels: channels, out_spatial: spatial }));
            nodes.push(Node { id, channels, spatial });
            continue;
        }
        if roll < 0.3 {
            let c = nodes.get(rng.gen_range(0..nodes.len().max(1))).map(|n| n.channels);
            if let Some(c) = c {
                let same: Vec<usize> = (0..nodes.len()).filter(|&j| nodes[j].channels == c).collect();
                if same.len() >= 2 {
                    let spatial = nodes[same[0]].spatial;
                    for &j in &same[..same.len().min(3)] {
                        edges.push(Edge::new(nodes[j].id.clone(), id.clone(), MergeMode::Add));
                    }
                    layers.push(Layer::Shape(ShapeNode { id: id.clone(), out_channels: c, out_spatial: spatial }));
                    nodes.push(Node { id, channels: c, spatial });
                    continue;
                }
            }
        }
        let producer = if nodes.is_empty() || rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0..nodes.len())) };
        let (m, ip) = match producer {
            Some(j) => (nodes[j].channels, nodes[j].spatial),
            None => (input.channels, input.spatial),
        };
        let n = rng.gen_range(1..=12);
        let g = *divisors(gcd(m, n)).choose(rng).unwrap();
        let p = rng.gen_range(0..=1);
        let k = rng.gen_range(1..=3.min(ip + 2 * p));
        let s = if ip > 2 { rng.gen_range(1..=2) } else { 1 };
        let conv = ConvLayerSpec::new(id.clone(), n, m, k, s, p, g, ip);
        let spatial = conv.ofm_size();
        if let Some(j) = producer {
            edges.push(Edge::new(nodes[j].id.clone(), id.clone(), MergeMode::Passthrough));
        }
        layers.push(Layer::Conv(conv));
        nodes.push(Node { id, channels: n, spatial });
    }
    NetworkSpec::new("random", input, layers, edges).expect("generator builds valid networks")
}

/// A chain of `convs` 3×3 convs with four width choices each.
pub fn chain_space(convs: usize) -> SearchSpace {
    let input = InputShape { channels: 3, spatial: 16 };
    let mut layers = Vec::new();
    let mut edges = Vec::new();
    let mut m = 3;
    for i in 0..convs {
        let id = format!("c{i}");
        layers.push(Layer::Conv(ConvLayerSpec::new(id.clone(), 32, m, 3, 1, 1, 1, 16)));
        if i > 0 {
            edges.push(Edge::new(format!("c{}", i - 1), id, MergeMode::Passthrough));
        }
        m = 32;
    }
    let base = NetworkSpec::new("toy", input, layers, edges).unwrap();
    let knobs = (0..convs)
        .map(|i| Knob::Width { name: format!("w{i}"), layers: vec![format!("c{i}")], multipliers: vec![0.25, 0.5, 0.75, 1.0] })
        .collect();
    SearchSpace::new(base, knobs).unwrap()
}

/// Six convs: 4096 candidates.
pub fn toy_space() -> SearchSpace {
    chain_space(6)
}
