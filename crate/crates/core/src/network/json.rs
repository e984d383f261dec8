use serde::{Deserialize, Serialize};

use super::{ConvLayerSpec, Edge, InputShape, Layer, MergeMode, NetworkError, NetworkSpec, ShapeNode};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    name: String,
    input: InputShape,
    layers: Vec<LayerDoc>,
    #[serde(default)]
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerDoc {
    Conv { id: String, n: u32, m: u32, k: u32, s: u32, p: u32, g: u32, ip: u32 },
    Shape { id: String, out_channels: u32, out_spatial: u32 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    from: String,
    to: String,
    mode: MergeMode,
}

/// Parse and validate a network JSON document.
pub fn parse_network(text: &str) -> Result<NetworkSpec, NetworkError> {
    let doc: NetworkDoc = serde_json::from_str(text).map_err(|e| NetworkError::Schema(e.to_string()))?;
    let layers = doc
        .layers
        .into_iter()
        .map(|l| match l {
            LayerDoc::Conv { id, n, m, k, s, p, g, ip } => Layer::Conv(ConvLayerSpec { id, n, m, k, s, p, g, ip }),
            LayerDoc::Shape { id, out_channels, out_spatial } => Layer::Shape(ShapeNode { id, out_channels, out_spatial }),
        })
        .collect();
    let edges = doc.edges.into_iter().map(|e| Edge::new(e.from, e.to, e.mode)).collect();
    NetworkSpec::new(doc.name, doc.input, layers, edges)
}

/// Serialize a network to the JSON document format accepted by [`parse_network`].
pub fn to_json(net: &NetworkSpec) -> String {
    let doc = NetworkDoc {
        name: net.name().to_string(),
        input: net.input(),
        layers: net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerDoc::Conv {
                    id: c.id.clone(),
                    n: c.n,
                    m: c.m,
                    k: c.k,
                    s: c.s,
                    p: c.p,
                    g: c.g,
                    ip: c.ip,
                },
                Layer::Shape(s) => LayerDoc::Shape {
                    id: s.id.clone(),
                    out_channels: s.out_channels,
                    out_spatial: s.out_spatial,
                },
            })
            .collect(),
        edges: net
            .edges()
            .iter()
            .map(|e| EdgeDoc { from: e.from.clone(), to: e.to.clone(), mode: e.mode })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("network document serializes")
}
