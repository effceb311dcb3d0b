//! Network morphisms: site enumeration, application with weight transfer,
//! the variable-FC resize, and randomized morph sequences with a replayable
//! log.
//!
//! A site is valid exactly when applying it leaves the graph acyclic and
//! shape-consistent. Validity is decided by applying the structural change to
//! a weightless [`Topology`] clone and re-running shape inference, with the
//! variable linear layer's input width left flexible because the linear
//! morphism adapts it afterwards.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::init::{conv_fans, glorot_conv, glorot_value};
use crate::graph::{GraphError, ImageShape, NASGraph, NodeId, NodeKind, Shape, ShapeCheck, ShapeMap, Topology};
use crate::ndt::{CombineMode, ConvBlockParams, LayerParams, LinearParams, Tensor};
use crate::sched::{on_morphism, AgingConfig, SchedError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphKind {
    /// Adds a parent to a node through an `Add` combine.
    Skip,
    /// Inserts a convolution block on an edge.
    Deepen,
    /// Multiplies a convolution's output channels.
    Widen,
    /// Concatenates an extra parent into a convolution's input.
    Merge,
    /// Inserts a max-pool on an edge.
    MaxPoolIns,
}

impl MorphKind {
    /// The set random morph sequences sample from.
    pub const SAMPLED: [MorphKind; 5] = [
        MorphKind::Skip,
        MorphKind::Deepen,
        MorphKind::Widen,
        MorphKind::Merge,
        MorphKind::MaxPoolIns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MorphKind::Skip => "skip",
            MorphKind::Deepen => "deepen",
            MorphKind::Widen => "widen",
            MorphKind::Merge => "merge",
            MorphKind::MaxPoolIns => "maxpool",
        }
    }
}

impl fmt::Display for MorphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEEPEN_KERNELS: [usize; 2] = [3, 5];
pub const WIDEN_FACTORS: [usize; 2] = [2, 4];
pub const POOL_KERNELS: [usize; 2] = [2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MorphSite {
    Skip { a: NodeId, b: NodeId },
    Deepen { x: NodeId, y: NodeId, kernel: usize, padded: bool },
    Widen { x: NodeId, y: NodeId, factor: usize },
    Merge { a: NodeId, b: NodeId },
    MaxPool { x: NodeId, y: NodeId, kernel: usize },
}

impl MorphSite {
    pub fn kind(&self) -> MorphKind {
        match self {
            MorphSite::Skip { .. } => MorphKind::Skip,
            MorphSite::Deepen { .. } => MorphKind::Deepen,
            MorphSite::Widen { .. } => MorphKind::Widen,
            MorphSite::Merge { .. } => MorphKind::Merge,
            MorphSite::MaxPool { .. } => MorphKind::MaxPoolIns,
        }
    }

    fn matches(&self, h: &Hyper) -> bool {
        match (self, h) {
            (MorphSite::Deepen { kernel, padded, .. }, Hyper::Deepen { kernel: k, padded: p }) => {
                kernel == k && padded == p
            }
            (MorphSite::Widen { factor, .. }, Hyper::Widen { factor: f }) => factor == f,
            (MorphSite::MaxPool { kernel, .. }, Hyper::MaxPool { kernel: k }) => kernel == k,
            (MorphSite::Skip { .. } | MorphSite::Merge { .. }, Hyper::None) => true,
            _ => false,
        }
    }
}

impl fmt::Display for MorphSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MorphSite::Skip { a, b } => write!(f, "skip {a} -> {b}"),
            MorphSite::Deepen { x, y, kernel, padded } => {
                write!(f, "deepen {x} -> {y} k={kernel} padded={padded}")
            }
            MorphSite::Widen { x, y, factor } => write!(f, "widen {x} -> {y} x{factor}"),
            MorphSite::Merge { a, b } => write!(f, "merge {a} -> {b}"),
            MorphSite::MaxPool { x, y, kernel } => write!(f, "maxpool {x} -> {y} k={kernel}"),
        }
    }
}

/// Hyperparameters drawn for one morphism.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hyper {
    None,
    Deepen { kernel: usize, padded: bool },
    Widen { factor: usize },
    MaxPool { kernel: usize },
}

/// Uniform draws: deepen kernel then padding, widen factor, pool kernel.
pub fn sample_hyper<R: Rng + ?Sized>(kind: MorphKind, rng: &mut R) -> (Hyper, u32) {
    match kind {
        MorphKind::Deepen => {
            let kernel = DEEPEN_KERNELS[rng.gen_range(0..2)];
            let padded = rng.gen_bool(0.5);
            (Hyper::Deepen { kernel, padded }, 2)
        }
        MorphKind::Widen => (
            Hyper::Widen {
                factor: WIDEN_FACTORS[rng.gen_range(0..2)],
            },
            1,
        ),
        MorphKind::MaxPoolIns => (
            Hyper::MaxPool {
                kernel: POOL_KERNELS[rng.gen_range(0..2)],
            },
            1,
        ),
        MorphKind::Skip | MorphKind::Merge => (Hyper::None, 0),
    }
}

/// Weight policy for values a morphism creates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Glorot-uniform for every new value.
    #[default]
    Default,
    /// Widen/merge/linear additions are 0; a deepened kernel is all 1.
    ZeroOne,
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(InitMode::Default),
            "zero_one" | "zeroone" | "01" => Ok(InitMode::ZeroOne),
            _ => Err(format!("unknown init mode '{s}' (expected default or zero_one)")),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Default => "default",
            InitMode::ZeroOne => "zero_one",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphEntry {
    pub kind: MorphKind,
    pub site: MorphSite,
    /// Seeds the generator for weights this morphism creates.
    pub init_seed: u64,
    /// Draws taken from the sequence generator to choose this entry.
    pub draws: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphLog {
    pub init: InitMode,
    pub aging: AgingConfig,
    /// Set when every kind ran out of sites before the requested count.
    #[serde(default)]
    pub exhausted: bool,
    #[serde(default)]
    pub entries: Vec<MorphEntry>,
}

impl MorphLog {
    pub fn new(init: InitMode, aging: AgingConfig) -> Self {
        Self {
            init,
            aging,
            exhausted: false,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kinds(&self) -> Vec<MorphKind> {
        self.entries.iter().map(|e| e.kind).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("morph log serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, MorphError> {
        toml::from_str(text).map_err(|e| MorphError::Log(e.message().to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorphError {
    #[error("morphism rejected at {site}: {reason}")]
    Rejected { site: MorphSite, reason: String },
    #[error("replay diverged at entry {index}: {reason}")]
    Replay { index: usize, reason: String },
    #[error("invalid morph log: {0}")]
    Log(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

/// What one application changed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Applied {
    /// The inserted node, for node-adding morphisms.
    pub new_node: Option<NodeId>,
    /// Whether the variable linear layer was resized.
    pub linear_resized: bool,
}

/// A validated site resolved to concrete structural edits.
#[derive(Clone, Debug)]
enum Plan {
    SkipReuse { a: NodeId, add: NodeId },
    SkipNew { a: NodeId, p: NodeId, b: NodeId },
    Deepen { x: NodeId, y: NodeId, kind: NodeKind },
    Widen { x: NodeId, y: NodeId, x_kind: NodeKind, y_kind: NodeKind },
    Merge { a: NodeId, p: NodeId, b: NodeId, b_kind: NodeKind },
    MaxPool { x: NodeId, y: NodeId, kind: NodeKind },
}

fn image_of(shapes: &ShapeMap, id: NodeId) -> Option<ImageShape> {
    match shapes.get(&id) {
        Some(Shape::Image(s)) => Some(*s),
        _ => None,
    }
}

/// `out_ch` of the closest convolution at or above `x`: fewest hops first,
/// then latest in topological order, then lowest id.
pub fn nearest_conv_channels(g: &NASGraph, x: NodeId) -> Option<usize> {
    let mut frontier = vec![x];
    let mut seen = BTreeSet::from([x]);
    while !frontier.is_empty() {
        let best = frontier
            .iter()
            .filter_map(|&id| match g.kind(id) {
                Some(NodeKind::Conv { out_ch, .. }) => Some((g.position(id), std::cmp::Reverse(id), *out_ch)),
                _ => None,
            })
            .max();
        if let Some((_, _, ch)) = best {
            return Some(ch);
        }
        let mut next = Vec::new();
        for id in frontier {
            for &p in g.parents(id) {
                if seen.insert(p) {
                    next.push(p);
                }
            }
        }
        frontier = next;
    }
    None
}

fn plan(g: &NASGraph, shapes: &ShapeMap, site: &MorphSite) -> Result<Plan, String> {
    let exists = |id: NodeId| {
        if g.contains(id) {
            Ok(())
        } else {
            Err(format!("unknown node {id}"))
        }
    };
    let edge = |x: NodeId, y: NodeId| -> Result<ImageShape, String> {
        exists(x)?;
        exists(y)?;
        if !g.children(x).contains(&y) {
            return Err(format!("no edge {x} -> {y}"));
        }
        image_of(shapes, x).ok_or_else(|| format!("{x} does not produce an image"))
    };
    let ordered = |a: NodeId, b: NodeId| -> Result<(), String> {
        if g.position(a) < g.position(b) {
            Ok(())
        } else {
            Err(format!("{a} does not precede {b}"))
        }
    };
    match *site {
        MorphSite::Skip { a, b } => {
            exists(a)?;
            exists(b)?;
            let eligible = matches!(
                g.kind(b),
                Some(NodeKind::Conv { .. } | NodeKind::MaxPool { .. } | NodeKind::Linear { variable: true, .. })
            );
            if !eligible || g.parents(b).len() != 1 {
                return Err(format!("{b} cannot take a skip input"));
            }
            image_of(shapes, a).ok_or_else(|| format!("{a} does not produce an image"))?;
            ordered(a, b)?;
            let p = g.parents(b)[0];
            if a == p {
                return Err(format!("{a} already feeds {b}"));
            }
            if matches!(g.kind(p), Some(NodeKind::Combine { mode: CombineMode::Add })) {
                if g.parents(p).contains(&a) {
                    return Err(format!("{a} already feeds {p}"));
                }
                Ok(Plan::SkipReuse { a, add: p })
            } else {
                Ok(Plan::SkipNew { a, p, b })
            }
        }
        MorphSite::Deepen { x, y, kernel, padded } => {
            if !DEEPEN_KERNELS.contains(&kernel) {
                return Err(format!("deepen kernel {kernel} not in {DEEPEN_KERNELS:?}"));
            }
            let s = edge(x, y)?;
            let out_ch = nearest_conv_channels(g, x).ok_or_else(|| format!("no convolution above {x}"))?;
            Ok(Plan::Deepen {
                x,
                y,
                kind: NodeKind::Conv {
                    kernel,
                    padded,
                    in_ch: s.c,
                    out_ch,
                },
            })
        }
        MorphSite::MaxPool { x, y, kernel } => {
            if !POOL_KERNELS.contains(&kernel) {
                return Err(format!("pool kernel {kernel} not in {POOL_KERNELS:?}"));
            }
            edge(x, y)?;
            Ok(Plan::MaxPool {
                x,
                y,
                kind: NodeKind::MaxPool { kernel, stride: kernel },
            })
        }
        MorphSite::Widen { x, y, factor } => {
            if !WIDEN_FACTORS.contains(&factor) {
                return Err(format!("widen factor {factor} not in {WIDEN_FACTORS:?}"));
            }
            exists(x)?;
            exists(y)?;
            if g.children(x) != [y] || g.parents(y) != [x] {
                return Err(format!("{x} -> {y} is not an exclusive edge"));
            }
            match (g.kind(x).cloned(), g.kind(y).cloned()) {
                (
                    Some(NodeKind::Conv {
                        kernel,
                        padded,
                        in_ch,
                        out_ch,
                    }),
                    Some(NodeKind::Conv {
                        kernel: ky,
                        padded: py,
                        out_ch: oy,
                        ..
                    }),
                ) => Ok(Plan::Widen {
                    x,
                    y,
                    x_kind: NodeKind::Conv {
                        kernel,
                        padded,
                        in_ch,
                        out_ch: out_ch * factor,
                    },
                    y_kind: NodeKind::Conv {
                        kernel: ky,
                        padded: py,
                        in_ch: out_ch * factor,
                        out_ch: oy,
                    },
                }),
                _ => Err(format!("{x} and {y} must both be convolutions")),
            }
        }
        MorphSite::Merge { a, b } => {
            exists(a)?;
            exists(b)?;
            let Some(NodeKind::Conv {
                kernel,
                padded,
                in_ch,
                out_ch,
            }) = g.kind(b).cloned()
            else {
                return Err(format!("{b} is not a convolution"));
            };
            if g.parents(b).len() != 1 {
                return Err(format!("{b} has no parent to merge with"));
            }
            let p = g.parents(b)[0];
            let sa = image_of(shapes, a).ok_or_else(|| format!("{a} does not produce an image"))?;
            ordered(a, b)?;
            if a == p {
                return Err(format!("{a} already feeds {b}"));
            }
            Ok(Plan::Merge {
                a,
                p,
                b,
                b_kind: NodeKind::Conv {
                    kernel,
                    padded,
                    in_ch: in_ch + sa.c,
                    out_ch,
                },
            })
        }
    }
}

fn overlay(g: &NASGraph, plan: &Plan) -> Result<Topology, GraphError> {
    let mut t = g.topology().clone();
    let fresh = NodeId(g.next_ordinal());
    match plan {
        Plan::SkipReuse { a, add } => t.push_edge(*a, *add),
        Plan::SkipNew { a, p, b } => {
            t.splice(*p, *b, fresh, NodeKind::Combine { mode: CombineMode::Add })?;
            t.push_edge(*a, fresh);
        }
        Plan::Deepen { x, y, kind } | Plan::MaxPool { x, y, kind } => t.splice(*x, *y, fresh, kind.clone())?,
        Plan::Widen { x, y, x_kind, y_kind } => {
            t.kinds.insert(*x, x_kind.clone());
            t.kinds.insert(*y, y_kind.clone());
        }
        Plan::Merge { a, p, b, b_kind } => {
            t.splice(*p, *b, fresh, NodeKind::Combine { mode: CombineMode::Concat })?;
            t.push_edge(*a, fresh);
            t.kinds.insert(*b, b_kind.clone());
        }
    }
    Ok(t)
}

fn trial_check(g: &NASGraph) -> ShapeCheck {
    ShapeCheck {
        flexible_flatten: true,
        strict_fc_cap: g.strict_fc_cap(),
    }
}

fn resolve(g: &NASGraph, shapes: &ShapeMap, site: &MorphSite) -> Result<Plan, String> {
    let p = plan(g, shapes, site)?;
    let t = overlay(g, &p).map_err(|e| e.to_string())?;
    t.infer_shapes(trial_check(g)).map_err(|e| e.to_string())?;
    Ok(p)
}

fn current_shapes(g: &NASGraph) -> Result<ShapeMap, MorphError> {
    Ok(g.infer_shapes().map_err(GraphError::from)?)
}

/// Whether `site` may be applied to `g`.
pub fn check_site(g: &NASGraph, site: &MorphSite) -> Result<(), MorphError> {
    let shapes = current_shapes(g)?;
    resolve(g, &shapes, site)
        .map(|_| ())
        .map_err(|reason| MorphError::Rejected { site: *site, reason })
}

/// Every valid site of `kind`, over all hyperparameter values, in a
/// deterministic order.
pub fn enumerate_sites(g: &NASGraph, kind: MorphKind) -> Vec<MorphSite> {
    let Ok(shapes) = g.infer_shapes() else {
        return Vec::new();
    };
    let ids: Vec<NodeId> = g.topo_order().to_vec();
    let image_edges: Vec<(NodeId, NodeId)> = g
        .edges()
        .into_iter()
        .filter(|(x, _)| image_of(&shapes, *x).is_some())
        .collect();
    let mut candidates = Vec::new();
    match kind {
        MorphKind::Skip | MorphKind::Merge => {
            for (pb, &b) in ids.iter().enumerate() {
                let [p] = g.parents(b) else { continue };
                let Some(target) = image_of(&shapes, *p) else { continue };
                for &a in &ids[..pb] {
                    let Some(sa) = image_of(&shapes, a) else { continue };
                    let fits = match kind {
                        MorphKind::Skip => sa == target,
                        _ => (sa.h, sa.w) == (target.h, target.w),
                    };
                    if fits {
                        candidates.push(match kind {
                            MorphKind::Skip => MorphSite::Skip { a, b },
                            _ => MorphSite::Merge { a, b },
                        });
                    }
                }
            }
        }
        MorphKind::Deepen => {
            for &(x, y) in &image_edges {
                for kernel in DEEPEN_KERNELS {
                    for padded in [true, false] {
                        candidates.push(MorphSite::Deepen { x, y, kernel, padded });
                    }
                }
            }
        }
        MorphKind::MaxPoolIns => {
            for &(x, y) in &image_edges {
                for kernel in POOL_KERNELS {
                    candidates.push(MorphSite::MaxPool { x, y, kernel });
                }
            }
        }
        MorphKind::Widen => {
            for &x in &ids {
                if let [y] = g.children(x) {
                    for factor in WIDEN_FACTORS {
                        candidates.push(MorphSite::Widen { x, y: *y, factor });
                    }
                }
            }
        }
    }
    candidates.retain(|s| resolve(g, &shapes, s).is_ok());
    candidates
}

fn fill_value<R: Rng + ?Sized>(init: InitMode, zero_one: f32, fans: (usize, usize), rng: &mut R) -> f32 {
    match init {
        InitMode::ZeroOne => zero_one,
        InitMode::Default => glorot_value(fans.0, fans.1, rng),
    }
}

/// Extends a kernel `[out, in, k, k]` to `new_in` input channels; new
/// slices follow the old ones in every output row.
fn grow_in_channels<R: Rng + ?Sized>(
    w: &Tensor,
    new_in: usize,
    init: InitMode,
    rng: &mut R,
) -> Result<Tensor, GraphError> {
    let (out, old_in, k, _) = w.dims4()?;
    let kk = k * k;
    let fans = conv_fans(new_in, out, k);
    let mut data = Vec::with_capacity(out * new_in * kk);
    for o in 0..out {
        data.extend_from_slice(&w.data()[o * old_in * kk..(o + 1) * old_in * kk]);
        for _ in old_in * kk..new_in * kk {
            data.push(fill_value(init, 0.0, fans, rng));
        }
    }
    Ok(Tensor::from_vec(&[out, new_in, k, k], data)?)
}

/// Appends output channels to a convolution block: new kernel rows, zero
/// bias, identity batch-norm.
fn grow_out_channels<R: Rng + ?Sized>(
    p: &ConvBlockParams,
    new_out: usize,
    init: InitMode,
    rng: &mut R,
) -> Result<ConvBlockParams, GraphError> {
    let (out, in_ch, k, _) = p.weight.dims4()?;
    let fans = conv_fans(in_ch, new_out, k);
    let mut weight = p.weight.data().to_vec();
    for _ in out * in_ch * k * k..new_out * in_ch * k * k {
        weight.push(fill_value(init, 0.0, fans, rng));
    }
    let extend = |t: &Tensor, v: f32| {
        let mut d = t.data().to_vec();
        d.resize(new_out, v);
        Tensor::from_vec(&[new_out], d)
    };
    Ok(ConvBlockParams {
        weight: Tensor::from_vec(&[new_out, in_ch, k, k], weight)?,
        bias: extend(&p.bias, 0.0)?,
        gamma: extend(&p.gamma, 1.0)?,
        beta: extend(&p.beta, 0.0)?,
        running_mean: extend(&p.running_mean, 0.0)?,
        running_var: extend(&p.running_var, 1.0)?,
    })
}

fn conv_of(g: &NASGraph, id: NodeId) -> Result<&ConvBlockParams, GraphError> {
    match g.params(id) {
        Some(LayerParams::Conv(p)) => Ok(p),
        _ => Err(GraphError::Input(format!("{id} has no convolution weights"))),
    }
}

fn execute<R: Rng + ?Sized>(g: &mut NASGraph, plan: Plan, init: InitMode, rng: &mut R) -> Result<Option<NodeId>, GraphError> {
    match plan {
        Plan::SkipReuse { a, add } => {
            g.connect(a, add)?;
            Ok(None)
        }
        Plan::SkipNew { a, p, b } => {
            let t = g.insert_combine(p, b, CombineMode::Add)?;
            g.connect(a, t)?;
            Ok(None)
        }
        Plan::Deepen { x, y, kind } => {
            let NodeKind::Conv {
                kernel, in_ch, out_ch, ..
            } = kind
            else {
                unreachable!("deepen inserts a convolution")
            };
            let params = match init {
                InitMode::ZeroOne => {
                    let mut p = ConvBlockParams::zeros(in_ch, out_ch, kernel);
                    p.weight.fill(1.0);
                    p
                }
                InitMode::Default => glorot_conv(in_ch, out_ch, kernel, rng),
            };
            let t = g.insert_between(x, y, kind, Some(LayerParams::Conv(params)))?;
            Ok(Some(t))
        }
        Plan::MaxPool { x, y, kind } => {
            g.insert_between(x, y, kind, None)?;
            Ok(None)
        }
        Plan::Widen { x, y, x_kind, y_kind } => {
            let NodeKind::Conv { out_ch: new_out, .. } = x_kind else {
                unreachable!("widen targets convolutions")
            };
            let px = grow_out_channels(conv_of(g, x)?, new_out, init, rng)?;
            let mut py = conv_of(g, y)?.clone();
            py.weight = grow_in_channels(&py.weight, new_out, init, rng)?;
            g.replace_node(x, x_kind, Some(LayerParams::Conv(px)))?;
            g.replace_node(y, y_kind, Some(LayerParams::Conv(py)))?;
            Ok(None)
        }
        Plan::Merge { a, p, b, b_kind } => {
            let NodeKind::Conv { in_ch: new_in, .. } = b_kind else {
                unreachable!("merge targets a convolution")
            };
            let mut pb = conv_of(g, b)?.clone();
            pb.weight = grow_in_channels(&pb.weight, new_in, init, rng)?;
            let t = g.insert_combine(p, b, CombineMode::Concat)?;
            g.connect(a, t)?;
            g.replace_node(b, b_kind, Some(LayerParams::Conv(pb)))?;
            Ok(None)
        }
    }
}

/// Resizes the variable linear layer to the current flatten width. Leading
/// rows are kept bit-identical; rows past the old width are 0 under ZeroOne
/// and Glorot otherwise. Returns whether anything changed.
pub fn morph_linear<R: Rng + ?Sized>(g: &mut NASGraph, init: InitMode, rng: &mut R) -> Result<bool, GraphError> {
    let shapes = g.topology().infer_shapes(trial_check(g))?;
    let v = g.variable_linear();
    let flat = match shapes.get(&g.parents(v)[0]) {
        Some(Shape::Image(s)) => s.flat_len(),
        _ => return Err(GraphError::Input("variable linear layer is not fed an image".into())),
    };
    let Some(NodeKind::Linear { in_dim, out_dim, variable }) = g.kind(v).cloned() else {
        unreachable!("variable_linear returns a linear node")
    };
    if flat == in_dim {
        return Ok(false);
    }
    let old = match g.params(v) {
        Some(LayerParams::Linear(p)) => p.clone(),
        _ => return Err(GraphError::Input(format!("{v} has no linear weights"))),
    };
    let keep = in_dim.min(flat) * out_dim;
    let mut weight = old.weight.data()[..keep].to_vec();
    for _ in keep..flat * out_dim {
        weight.push(fill_value(init, 0.0, (flat, out_dim), rng));
    }
    let params = LinearParams {
        weight: Tensor::from_vec(&[flat, out_dim], weight)?,
        bias: old.bias,
    };
    g.replace_node(
        v,
        NodeKind::Linear {
            in_dim: flat,
            out_dim,
            variable,
        },
        Some(LayerParams::Linear(params)),
    )?;
    Ok(true)
}

/// Applies `site`, resizes the variable linear layer if the flatten width
/// changed, and updates aging. On rejection the graph is untouched.
pub fn apply_site<R: Rng + ?Sized>(
    g: &mut NASGraph,
    site: &MorphSite,
    init: InitMode,
    aging: &AgingConfig,
    rng: &mut R,
) -> Result<Applied, MorphError> {
    let shapes = current_shapes(g)?;
    let plan = resolve(g, &shapes, site).map_err(|reason| MorphError::Rejected { site: *site, reason })?;
    let new_node = execute(g, plan, init, rng)?;
    let linear_resized = morph_linear(g, init, rng)?;
    let mut state = g.aging().clone();
    on_morphism(&mut state, site.kind(), g, new_node, aging)?;
    *g.aging_mut() = state;
    g.validate()?;
    Ok(Applied {
        new_node,
        linear_resized,
    })
}

/// Skip and max-pool create no weights, so they need no generator.
pub fn apply_skip(g: &mut NASGraph, a: NodeId, b: NodeId) -> Result<Applied, MorphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    apply_site(g, &MorphSite::Skip { a, b }, InitMode::Default, &AgingConfig::default(), &mut rng)
}

pub fn apply_maxpool(g: &mut NASGraph, x: NodeId, y: NodeId, kernel: usize) -> Result<Applied, MorphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    apply_site(
        g,
        &MorphSite::MaxPool { x, y, kernel },
        InitMode::Default,
        &AgingConfig::default(),
        &mut rng,
    )
}

pub fn apply_deepen<R: Rng + ?Sized>(
    g: &mut NASGraph,
    x: NodeId,
    y: NodeId,
    kernel: usize,
    padded: bool,
    init: InitMode,
    rng: &mut R,
) -> Result<Applied, MorphError> {
    apply_site(
        g,
        &MorphSite::Deepen { x, y, kernel, padded },
        init,
        &AgingConfig::default(),
        rng,
    )
}

pub fn apply_widen<R: Rng + ?Sized>(
    g: &mut NASGraph,
    x: NodeId,
    y: NodeId,
    factor: usize,
    init: InitMode,
    rng: &mut R,
) -> Result<Applied, MorphError> {
    apply_site(g, &MorphSite::Widen { x, y, factor }, init, &AgingConfig::default(), rng)
}

pub fn apply_merge<R: Rng + ?Sized>(
    g: &mut NASGraph,
    a: NodeId,
    b: NodeId,
    init: InitMode,
    rng: &mut R,
) -> Result<Applied, MorphError> {
    apply_site(g, &MorphSite::Merge { a, b }, init, &AgingConfig::default(), rng)
}

/// Multiplies the channels of the convolution feeding the flatten, then
/// grows the variable linear layer to match. Not part of the sampled set;
/// it exercises the growth direction of the linear morphism.
pub fn widen_flatten_source<R: Rng + ?Sized>(
    g: &mut NASGraph,
    factor: usize,
    init: InitMode,
    rng: &mut R,
) -> Result<Applied, MorphError> {
    if factor < 2 {
        return Err(MorphError::Usage(format!("widen factor {factor} < 2")));
    }
    let x = g.image_sink();
    let Some(NodeKind::Conv {
        kernel,
        padded,
        in_ch,
        out_ch,
    }) = g.kind(x).cloned()
    else {
        return Err(MorphError::Usage(format!("{} is not a convolution", g.name(x))));
    };
    if g.children(x).len() != 1 {
        return Err(MorphError::Usage(format!("{} has other consumers", g.name(x))));
    }
    let new_out = out_ch * factor;
    let p = grow_out_channels(conv_of(g, x)?, new_out, init, rng)?;
    g.replace_node(
        x,
        NodeKind::Conv {
            kernel,
            padded,
            in_ch,
            out_ch: new_out,
        },
        Some(LayerParams::Conv(p)),
    )?;
    let linear_resized = morph_linear(g, init, rng)?;
    g.aging_mut().reset();
    g.validate()?;
    Ok(Applied {
        new_node: None,
        linear_resized,
    })
}

pub struct MorphOutcome {
    pub child: NASGraph,
    pub log: MorphLog,
}

/// Clones `parent` and applies `n_nm` random morphisms. Each step draws a
/// kind uniformly from those not yet found empty during the step, then its
/// hyperparameters, then a site among the matching ones (any site of the
/// kind if none match), then a weight seed. When every kind is empty the
/// sequence stops early and the log is flagged as exhausted.
pub fn random_morph_sequence<R: Rng + ?Sized>(
    parent: &NASGraph,
    n_nm: usize,
    init: InitMode,
    aging: &AgingConfig,
    rng: &mut R,
) -> Result<MorphOutcome, MorphError> {
    if n_nm == 0 {
        return Err(MorphError::Usage("need at least one morphism".into()));
    }
    let mut child = parent.clone();
    let mut log = MorphLog::new(init, *aging);
    'steps: for _ in 0..n_nm {
        let mut remaining: Vec<MorphKind> = MorphKind::SAMPLED.to_vec();
        let mut draws = 0u32;
        loop {
            if remaining.is_empty() {
                log.exhausted = true;
                break 'steps;
            }
            let ki = rng.gen_range(0..remaining.len());
            draws += 1;
            let kind = remaining[ki];
            let sites = enumerate_sites(&child, kind);
            if sites.is_empty() {
                remaining.remove(ki);
                continue;
            }
            let (hyper, n) = sample_hyper(kind, rng);
            draws += n;
            let matching: Vec<&MorphSite> = sites.iter().filter(|s| s.matches(&hyper)).collect();
            let site = if matching.is_empty() {
                sites[rng.gen_range(0..sites.len())]
            } else {
                *matching[rng.gen_range(0..matching.len())]
            };
            let init_seed = rng.gen::<u64>() >> 1;
            draws += 2;
            let mut wrng = ChaCha8Rng::seed_from_u64(init_seed);
            apply_site(&mut child, &site, init, aging, &mut wrng)?;
            log.entries.push(MorphEntry {
                kind,
                site,
                init_seed,
                draws,
            });
            break;
        }
    }
    Ok(MorphOutcome { child, log })
}

/// Re-applies a log to a clone of `parent`.
pub fn replay(parent: &NASGraph, log: &MorphLog) -> Result<NASGraph, MorphError> {
    let mut g = parent.clone();
    for (index, e) in log.entries.iter().enumerate() {
        if e.site.kind() != e.kind {
            return Err(MorphError::Replay {
                index,
                reason: format!("entry kind {} disagrees with site {}", e.kind, e.site),
            });
        }
        let mut wrng = ChaCha8Rng::seed_from_u64(e.init_seed);
        apply_site(&mut g, &e.site, log.init, &log.aging, &mut wrng).map_err(|err| MorphError::Replay {
            index,
            reason: err.to_string(),
        })?;
    }
    Ok(g)
}
