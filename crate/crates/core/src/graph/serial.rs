//! Checkpoint format.
//!
//! ```text
//! NASGRAPH <version>\n
//! manifest <n>\n
//! <n bytes of TOML: topology, hyperparameters, aging, tensor table, morph log>
//! params <m>\n
//! <m bytes: little-endian f32 values, addressed by the tensor table>
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{GraphError, ImageShape, NASGraph, NodeId, NodeKind, Topology};
use crate::morph::MorphLog;
use crate::ndt::{ConvBlockParams, LayerParams, LinearParams, Tensor};
use crate::sched::AgingState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "NASGRAPH";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    input_shape: [usize; 3],
    num_classes: usize,
    fc_width: usize,
    strict_fc_cap: bool,
    next_ordinal: u32,
    nodes: Vec<NodeRecord>,
    aging: Vec<AgingRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    morph_log: Option<MorphLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u32,
    spec: NodeKind,
    parents: Vec<u32>,
    children: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Offset into the parameter blob, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgingRecord {
    id: u32,
    alpha: f64,
}

pub fn serialize(g: &NASGraph) -> Vec<u8> {
    encode_checkpoint(g, None)
}

pub fn deserialize(bytes: &[u8]) -> Result<NASGraph, GraphError> {
    decode_checkpoint(bytes).map(|(g, _)| g)
}

pub fn encode_checkpoint(g: &NASGraph, log: Option<&MorphLog>) -> Vec<u8> {
    let mut blob: Vec<u8> = Vec::new();
    let mut nodes = Vec::new();
    for id in g.node_ids() {
        let mut tensors = Vec::new();
        if let Some(p) = g.params(id) {
            for (name, t) in p.tensors() {
                tensors.push(TensorRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset: blob.len() / 4,
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        nodes.push(NodeRecord {
            id: id.0,
            spec: g.kind(id).expect("listed").clone(),
            parents: g.parents(id).iter().map(|p| p.0).collect(),
            children: g.children(id).iter().map(|c| c.0).collect(),
            tensors,
        });
    }
    let s = g.input_shape();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: [s.c, s.h, s.w],
        num_classes: g.num_classes(),
        fc_width: g.fc_width(),
        strict_fc_cap: g.strict_fc_cap(),
        next_ordinal: g.next_ordinal(),
        nodes,
        aging: g
            .aging()
            .multipliers()
            .iter()
            .map(|(id, &alpha)| AgingRecord { id: id.0, alpha })
            .collect(),
        morph_log: log.cloned(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\nmanifest {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(format!("params {}\n", blob.len()).as_bytes());
    out.extend_from_slice(&blob);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> GraphError {
        GraphError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn line(&mut self) -> Result<&'a str, GraphError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(line)
    }

    fn sized(&mut self, tag: &str) -> Result<&'a [u8], GraphError> {
        let start = self.pos;
        let line = self.line()?;
        let n: usize = line
            .strip_prefix(tag)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| GraphError::Parse {
                offset: start,
                message: format!("expected '{tag} <len>'"),
            })?;
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "{tag} section truncated: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let body = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(body)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NASGraph, Option<MorphLog>), GraphError> {
    let mut r = Reader { bytes, pos: 0 };
    let header = r.line()?;
    let version: u32 = header
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| GraphError::Parse {
            offset: 0,
            message: "not a graph checkpoint".into(),
        })?;
    if version != FORMAT_VERSION {
        return Err(GraphError::Parse {
            offset: 0,
            message: format!("unsupported format version {version}"),
        });
    }
    let manifest_start = r.pos;
    let text = r.sized("manifest")?;
    let body_offset = r.pos - text.len();
    let text = std::str::from_utf8(text).map_err(|e| GraphError::Parse {
        offset: body_offset + e.valid_up_to(),
        message: "manifest is not UTF-8".into(),
    })?;
    let m: Manifest = toml::from_str(text).map_err(|e| GraphError::Parse {
        offset: body_offset + e.span().map_or(0, |s| s.start),
        message: e.message().to_string(),
    })?;
    if m.format_version != version {
        return Err(GraphError::Parse {
            offset: manifest_start,
            message: "manifest version disagrees with header".into(),
        });
    }
    let blob_start = r.pos;
    let blob = r.sized("params")?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after parameter blob"));
    }
    let blob_offset = blob_start + (r.pos - blob_start - blob.len());
    if blob.len() % 4 != 0 {
        return Err(GraphError::Parse {
            offset: blob_offset,
            message: "parameter blob is not a whole number of f32 values".into(),
        });
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let bad = |message: String| GraphError::Parse {
        offset: body_offset,
        message,
    };
    let [c, h, w] = m.input_shape;
    let mut topo = Topology::new(ImageShape::new(c, h, w), m.fc_width);
    let mut params = BTreeMap::new();
    let ids: BTreeSet<u32> = m.nodes.iter().map(|n| n.id).collect();
    if ids.len() != m.nodes.len() {
        return Err(bad("duplicate node ids".into()));
    }
    for n in &m.nodes {
        topo.add_node(NodeId(n.id), n.spec.clone());
    }
    for n in &m.nodes {
        for list in [&n.parents, &n.children] {
            if let Some(missing) = list.iter().find(|i| !ids.contains(i)) {
                return Err(bad(format!("node {} references unknown node {missing}", n.id)));
            }
        }
        topo.parents.insert(NodeId(n.id), n.parents.iter().map(|&i| NodeId(i)).collect());
        topo.children.insert(NodeId(n.id), n.children.iter().map(|&i| NodeId(i)).collect());
    }
    for (x, y) in topo.edges() {
        let expected = topo.children(x).iter().filter(|&&c| c == y).count();
        if topo.parents(y).iter().filter(|&&p| p == x).count() != expected {
            return Err(bad(format!("edge {} -> {} listed on one side only", x.0, y.0)));
        }
    }
    let parent_edges: usize = topo.parents.values().map(Vec::len).sum();
    if parent_edges != topo.edges().len() {
        return Err(bad("parent and child lists disagree".into()));
    }
    for n in &m.nodes {
        let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
        for t in &n.tensors {
            let len: usize = t.shape.iter().product();
            let slice = values
                .get(t.offset..t.offset + len)
                .ok_or_else(|| bad(format!("tensor {}.{} outside parameter blob", n.id, t.name)))?;
            let tensor = Tensor::from_vec(&t.shape, slice.to_vec())
                .map_err(|e| bad(format!("tensor {}.{}: {e}", n.id, t.name)))?;
            tensors.insert(t.name.as_str(), tensor);
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(format!("node {} lacks tensor {name}", n.id)))
        };
        let p = match n.spec {
            NodeKind::Conv { .. } => Some(LayerParams::Conv(ConvBlockParams {
                weight: take("weight")?,
                bias: take("bias")?,
                gamma: take("gamma")?,
                beta: take("beta")?,
                running_mean: take("running_mean")?,
                running_var: take("running_var")?,
            })),
            NodeKind::Linear { .. } => Some(LayerParams::Linear(LinearParams {
                weight: take("weight")?,
                bias: take("bias")?,
            })),
            _ => None,
        };
        if !tensors.is_empty() {
            return Err(bad(format!("node {} carries unexpected tensors", n.id)));
        }
        if let Some(p) = p {
            params.insert(NodeId(n.id), p);
        }
    }
    let mut aging = AgingState::default();
    for a in &m.aging {
        if !ids.contains(&a.id) {
            return Err(bad(format!("aging entry for unknown node {}", a.id)));
        }
        aging.set(NodeId(a.id), a.alpha);
    }
    let g = NASGraph::from_parts(topo, params, m.num_classes, m.strict_fc_cap, m.next_ordinal, aging)?;
    Ok((g, m.morph_log))
}
