//! The architecture graph: a DAG of typed layer nodes (convolution blocks,
//! max pools, combine nodes, linear layers) with acyclicity enforcement,
//! whole-graph shape inference, execution, serialization and DOT export.
//!
//! Flatten and the ReLU between the two classifier layers are not nodes: the
//! variable linear layer flattens its image input and applies ReLU to its
//! output.

mod dot;
pub mod init;
mod network;
mod serial;
mod topology;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndt::{CombineMode, ConvBlockParams, LayerParams, LinearParams, NdtError};
use crate::sched::AgingState;

pub use network::Network;
pub use serial::{decode_checkpoint, deserialize, encode_checkpoint, serialize, FORMAT_VERSION};
pub use topology::{ShapeCheck, Topology};

/// Node identifier. Ordinals are assigned in creation order and never reused
/// within a graph lineage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.c, self.h, self.w)
    }
}

/// Output shape of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Image(ImageShape),
    Flat(usize),
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Image(s) => s.fmt(f),
            Shape::Flat(n) => write!(f, "({n})"),
        }
    }
}

pub type ShapeMap = BTreeMap<NodeId, Shape>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// Conv (stride 1) -> BatchNorm -> ReLU.
    Conv {
        kernel: usize,
        padded: bool,
        in_ch: usize,
        out_ch: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Combine {
        mode: CombineMode,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
        variable: bool,
    },
}

impl NodeKind {
    pub fn prefix(&self) -> &'static str {
        match self {
            NodeKind::Conv { .. } => "conv",
            NodeKind::MaxPool { .. } => "pool",
            NodeKind::Combine {
                mode: CombineMode::Add,
            } => "add",
            NodeKind::Combine {
                mode: CombineMode::Concat,
            } => "concat",
            NodeKind::Linear { .. } => "linear",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, NodeKind::Conv { .. } | NodeKind::Linear { .. })
    }

    pub fn is_image(&self) -> bool {
        !matches!(self, NodeKind::Linear { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, NodeKind::Conv { .. })
    }

    pub fn is_combine(&self) -> bool {
        matches!(self, NodeKind::Combine { .. })
    }

    /// Whether `params` carries tensors of the shapes this kind implies.
    pub fn params_match(&self, params: Option<&LayerParams>) -> bool {
        match (self, params) {
            (
                NodeKind::Conv {
                    kernel,
                    in_ch,
                    out_ch,
                    ..
                },
                Some(LayerParams::Conv(p)),
            ) => {
                p.weight.shape() == [*out_ch, *in_ch, *kernel, *kernel]
                    && [&p.bias, &p.gamma, &p.beta, &p.running_mean, &p.running_var]
                        .iter()
                        .all(|t| t.shape() == [*out_ch])
            }
            (NodeKind::Linear { in_dim, out_dim, .. }, Some(LayerParams::Linear(p))) => {
                p.weight.shape() == [*in_dim, *out_dim] && p.bias.shape() == [*out_dim]
            }
            (NodeKind::MaxPool { .. } | NodeKind::Combine { .. }, None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("add node {node} has unequal parent shapes {shapes:?}")]
    AddMismatch { node: NodeId, shapes: Vec<ImageShape> },
    #[error("concat node {node} has parents with unequal height/width {shapes:?}")]
    ConcatMismatch { node: NodeId, shapes: Vec<ImageShape> },
    #[error("node {node} produces an empty spatial extent")]
    DegenerateSpatial { node: NodeId },
    #[error("flatten size {flatten} at {node} exceeds fc width {cap}")]
    FcWidthExceeded {
        node: NodeId,
        flatten: usize,
        cap: usize,
    },
    #[error("node {node} expects input width {expected}, got {found}")]
    ChannelMismatch {
        node: NodeId,
        expected: usize,
        found: usize,
    },
    #[error("node {node}: {reason}")]
    Structure { node: NodeId, reason: String },
    #[error("graph contains a cycle")]
    Cycle,
}

impl ShapeError {
    pub fn node(&self) -> Option<NodeId> {
        match self {
            ShapeError::AddMismatch { node, .. }
            | ShapeError::ConcatMismatch { node, .. }
            | ShapeError::DegenerateSpatial { node }
            | ShapeError::FcWidthExceeded { node, .. }
            | ShapeError::ChannelMismatch { node, .. }
            | ShapeError::Structure { node, .. } => Some(*node),
            ShapeError::Cycle => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tensor(#[from] NdtError),
    #[error("no edge {0} -> {1}")]
    MissingEdge(NodeId, NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{0} does not precede {1} in topological order")]
    TopologicalOrder(NodeId, NodeId),
    #[error("{0} is not a combine node")]
    NotCombine(NodeId),
    #[error("integrity violation: graph contains a cycle")]
    Cycle,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Hyperparameters of the seed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedChoice {
    pub kernel: usize,
    pub padded: bool,
    pub channels: usize,
}

impl SeedChoice {
    pub const KERNELS: [usize; 2] = [3, 5];
    pub const CHANNELS: [usize; 3] = [8, 16, 32];

    /// Draws kernel, padding and channels uniformly, in that order.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kernel = Self::KERNELS[rng.gen_range(0..2)];
        let padded = rng.gen_bool(0.5);
        let channels = Self::CHANNELS[rng.gen_range(0..3)];
        Self {
            kernel,
            padded,
            channels,
        }
    }
}

/// A candidate architecture with its weights and aging state.
#[derive(Clone, Debug, PartialEq)]
pub struct NASGraph {
    topo: Topology,
    params: BTreeMap<NodeId, LayerParams>,
    num_classes: usize,
    strict_fc_cap: bool,
    next_ordinal: u32,
    aging: AgingState,
    order: Vec<NodeId>,
}

impl NASGraph {
    /// Random seed architecture: one convolution block, then the variable
    /// linear layer (flatten input, ReLU output) and the classifier.
    pub fn seed<R: Rng + ?Sized>(
        input_shape: ImageShape,
        num_classes: usize,
        fc_width: usize,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        let choice = SeedChoice::sample(rng);
        Self::seed_with(input_shape, num_classes, fc_width, choice, rng)
    }

    pub fn seed_with<R: Rng + ?Sized>(
        input_shape: ImageShape,
        num_classes: usize,
        fc_width: usize,
        mut choice: SeedChoice,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        if input_shape.c == 0 || input_shape.h == 0 || input_shape.w == 0 {
            return Err(GraphError::Input(format!("empty input shape {input_shape}")));
        }
        if num_classes < 2 || fc_width == 0 {
            return Err(GraphError::Input(format!(
                "need >= 2 classes and a positive fc width, got {num_classes} / {fc_width}"
            )));
        }
        if !choice.padded && (input_shape.h < choice.kernel || input_shape.w < choice.kernel) {
            choice.padded = true;
        }
        let conv = NodeKind::Conv {
            kernel: choice.kernel,
            padded: choice.padded,
            in_ch: input_shape.c,
            out_ch: choice.channels,
        };
        let mut topo = Topology::new(input_shape, fc_width);
        topo.add_node(NodeId(0), conv);
        let shapes = topo.infer_shapes(ShapeCheck::default())?;
        let flat = match shapes[&NodeId(0)] {
            Shape::Image(s) => s.flat_len(),
            Shape::Flat(_) => unreachable!("conv output is an image"),
        };
        topo.add_node(
            NodeId(1),
            NodeKind::Linear {
                in_dim: flat,
                out_dim: fc_width,
                variable: true,
            },
        );
        topo.add_node(
            NodeId(2),
            NodeKind::Linear {
                in_dim: fc_width,
                out_dim: num_classes,
                variable: false,
            },
        );
        topo.push_edge(NodeId(0), NodeId(1));
        topo.push_edge(NodeId(1), NodeId(2));

        let mut params = BTreeMap::new();
        params.insert(
            NodeId(0),
            LayerParams::Conv(init::glorot_conv(input_shape.c, choice.channels, choice.kernel, rng)),
        );
        params.insert(NodeId(1), LayerParams::Linear(init::glorot_linear(flat, fc_width, rng)));
        params.insert(
            NodeId(2),
            LayerParams::Linear(init::glorot_linear(fc_width, num_classes, rng)),
        );
        let mut g = Self {
            topo,
            params,
            num_classes,
            strict_fc_cap: false,
            next_ordinal: 3,
            aging: AgingState::default(),
            order: Vec::new(),
        };
        g.refresh_order()?;
        Ok(g)
    }

    fn refresh_order(&mut self) -> Result<(), GraphError> {
        self.order = self.topo.topo_order()?;
        Ok(())
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn input_shape(&self) -> ImageShape {
        self.topo.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fc_width(&self) -> usize {
        self.topo.fc_width
    }

    pub fn strict_fc_cap(&self) -> bool {
        self.strict_fc_cap
    }

    /// Enables the strict policy that rejects flatten sizes above `fc_width`.
    pub fn set_strict_fc_cap(&mut self, strict: bool) {
        self.strict_fc_cap = strict;
    }

    pub fn next_ordinal(&self) -> u32 {
        self.next_ordinal
    }

    pub fn aging(&self) -> &AgingState {
        &self.aging
    }

    pub fn aging_mut(&mut self) -> &mut AgingState {
        &mut self.aging
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.topo.kinds.contains_key(&id)
    }

    pub fn kind(&self, id: NodeId) -> Option<&NodeKind> {
        self.topo.kind(id)
    }

    pub fn params(&self, id: NodeId) -> Option<&LayerParams> {
        self.params.get(&id)
    }

    pub fn params_mut(&mut self, id: NodeId) -> Option<&mut LayerParams> {
        self.params.get_mut(&id)
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        self.topo.parents(id)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.topo.children(id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.topo.node_ids()
    }

    pub fn node_count(&self) -> usize {
        self.topo.len()
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.topo.edges()
    }

    /// Display name such as `conv0` or `add27`.
    pub fn name(&self, id: NodeId) -> String {
        match self.kind(id) {
            Some(k) => format!("{}{}", k.prefix(), id.0),
            None => format!("node{}", id.0),
        }
    }

    /// Cached topological order (Kahn, ties by ascending id).
    pub fn topo_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.order.iter().position(|&n| n == id)
    }

    pub fn shape_check(&self) -> ShapeCheck {
        ShapeCheck {
            flexible_flatten: false,
            strict_fc_cap: self.strict_fc_cap,
        }
    }

    pub fn infer_shapes(&self) -> Result<ShapeMap, ShapeError> {
        self.topo.infer_shapes(self.shape_check())
    }

    pub fn source(&self) -> NodeId {
        self.order[0]
    }

    pub fn variable_linear(&self) -> NodeId {
        self.topo.variable_linear().expect("graph has a variable linear layer")
    }

    pub fn output_linear(&self) -> NodeId {
        *self.order.last().expect("non-empty graph")
    }

    /// The image node feeding the flatten.
    pub fn image_sink(&self) -> NodeId {
        self.parents(self.variable_linear())[0]
    }

    /// Learnable scalar count (batch-norm running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(LayerParams::learnable_count).sum()
    }

    fn check_params(kind: &NodeKind, params: Option<&LayerParams>) -> Result<(), GraphError> {
        if kind.params_match(params) {
            Ok(())
        } else {
            Err(GraphError::Input(format!(
                "parameters do not match node hyperparameters {kind:?}"
            )))
        }
    }

    /// Splices a new node into edge `(x, y)`. Acyclic by construction; the
    /// caller re-runs shape inference.
    pub fn insert_between(
        &mut self,
        x: NodeId,
        y: NodeId,
        kind: NodeKind,
        params: Option<LayerParams>,
    ) -> Result<NodeId, GraphError> {
        if !self.topo.has_edge(x, y) {
            return Err(GraphError::MissingEdge(x, y));
        }
        Self::check_params(&kind, params.as_ref())?;
        let t = NodeId(self.next_ordinal);
        self.topo.splice(x, y, t, kind)?;
        self.next_ordinal += 1;
        if let Some(p) = params {
            self.params.insert(t, p);
        }
        self.refresh_order()?;
        Ok(t)
    }

    /// Adds edge `x -> y` into combine node `y`. Rejected if `x` is `y` or
    /// one of its descendants, or if the edge already exists.
    pub fn connect(&mut self, x: NodeId, y: NodeId) -> Result<(), GraphError> {
        for id in [x, y] {
            if !self.contains(id) {
                return Err(GraphError::UnknownNode(id));
            }
        }
        if !self.kind(y).map_or(false, NodeKind::is_combine) {
            return Err(GraphError::NotCombine(y));
        }
        if self.topo.has_edge(x, y) || self.topo.reaches(y, x) {
            return Err(GraphError::TopologicalOrder(x, y));
        }
        self.topo.push_edge(x, y);
        self.refresh_order()
    }

    /// Replaces a node's hyperparameters and weights together.
    pub fn replace_node(
        &mut self,
        id: NodeId,
        kind: NodeKind,
        params: Option<LayerParams>,
    ) -> Result<(), GraphError> {
        let old = self.topo.kinds.get(&id).ok_or(GraphError::UnknownNode(id))?;
        if std::mem::discriminant(old) != std::mem::discriminant(&kind) {
            return Err(GraphError::Input(format!("cannot change the kind of {id}")));
        }
        Self::check_params(&kind, params.as_ref())?;
        self.topo.kinds.insert(id, kind);
        match params {
            Some(p) => self.params.insert(id, p),
            None => self.params.remove(&id),
        };
        Ok(())
    }

    /// Inserts a combine node on edge `(x, y)` and returns its id.
    pub fn insert_combine(&mut self, x: NodeId, y: NodeId, mode: CombineMode) -> Result<NodeId, GraphError> {
        self.insert_between(x, y, NodeKind::Combine { mode }, None)
    }

    /// Checks every structural invariant. Used by tests and after loading.
    pub fn validate(&self) -> Result<ShapeMap, GraphError> {
        let order = self.topo.topo_order()?;
        if order != self.order {
            return Err(GraphError::Usage("cached topological order is stale".into()));
        }
        let sources = self.topo.sources();
        if sources.len() != 1 || !self.kind(sources[0]).map_or(false, NodeKind::is_conv) {
            return Err(GraphError::Input(format!("expected one conv source, found {sources:?}")));
        }
        let sinks: Vec<NodeId> = self.node_ids().filter(|&id| self.children(id).is_empty()).collect();
        let variable: Vec<NodeId> = self
            .node_ids()
            .filter(|&id| matches!(self.kind(id), Some(NodeKind::Linear { variable: true, .. })))
            .collect();
        if variable.len() != 1 {
            return Err(GraphError::Input(format!("expected one variable linear layer, found {}", variable.len())));
        }
        if sinks.len() != 1
            || !matches!(self.kind(sinks[0]), Some(NodeKind::Linear { variable: false, .. }))
        {
            return Err(GraphError::Input(format!("expected one classifier sink, found {sinks:?}")));
        }
        for id in self.node_ids() {
            let kind = self.kind(id).expect("listed");
            let np = self.parents(id).len();
            let ok = match kind {
                NodeKind::Combine { .. } => np >= 2,
                _ => np == 1 || id == sources[0],
            };
            if !ok {
                return Err(GraphError::Input(format!("{} has {np} parents", self.name(id))));
            }
            Self::check_params(kind, self.params.get(&id))?;
            if id.0 >= self.next_ordinal {
                return Err(GraphError::Input(format!("{id} beyond next ordinal")));
            }
        }
        Ok(self.infer_shapes()?)
    }

    pub fn to_dot(&self) -> String {
        dot::to_dot(self)
    }

    pub(crate) fn from_parts(
        topo: Topology,
        params: BTreeMap<NodeId, LayerParams>,
        num_classes: usize,
        strict_fc_cap: bool,
        next_ordinal: u32,
        aging: AgingState,
    ) -> Result<Self, GraphError> {
        let mut g = Self {
            topo,
            params,
            num_classes,
            strict_fc_cap,
            next_ordinal,
            aging,
            order: Vec::new(),
        };
        g.refresh_order()?;
        g.validate()?;
        Ok(g)
    }

    pub(crate) fn set_params(&mut self, id: NodeId, p: LayerParams) {
        self.params.insert(id, p);
    }
}

/// Shorthand used by morph and tests.
pub fn conv_params(p: &LayerParams) -> Option<&ConvBlockParams> {
    match p {
        LayerParams::Conv(c) => Some(c),
        _ => None,
    }
}

pub fn linear_params(p: &LayerParams) -> Option<&LinearParams> {
    match p {
        LayerParams::Linear(l) => Some(l),
        _ => None,
    }
}
