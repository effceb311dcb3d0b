use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::{GraphError, ImageShape, NodeId, NodeKind, Shape, ShapeError, ShapeMap};
use crate::ndt::{conv_output_dim, same_padding, CombineMode};

/// How the variable linear layer's input width is checked during shape
/// inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ShapeCheck {
    /// Accept a flatten size that differs from the variable layer's `in_dim`
    /// (the linear morphism resizes it afterwards).
    pub flexible_flatten: bool,
    /// Reject flatten sizes above `fc_width`.
    pub strict_fc_cap: bool,
}

/// Graph structure and node hyperparameters without any weights. Cheap to
/// clone, which is what site enumeration does to trial a morphism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub(crate) input_shape: ImageShape,
    pub(crate) fc_width: usize,
    pub(crate) kinds: BTreeMap<NodeId, NodeKind>,
    pub(crate) parents: BTreeMap<NodeId, Vec<NodeId>>,
    pub(crate) children: BTreeMap<NodeId, Vec<NodeId>>,
}

impl Topology {
    pub fn new(input_shape: ImageShape, fc_width: usize) -> Self {
        Self {
            input_shape,
            fc_width,
            kinds: BTreeMap::new(),
            parents: BTreeMap::new(),
            children: BTreeMap::new(),
        }
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn kind(&self, id: NodeId) -> Option<&NodeKind> {
        self.kinds.get(&id)
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        self.parents.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.kinds.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// All edges, ordered by source id then child-list position.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.children
            .iter()
            .flat_map(|(&x, cs)| cs.iter().map(move |&y| (x, y)))
            .collect()
    }

    pub fn has_edge(&self, x: NodeId, y: NodeId) -> bool {
        self.children(x).contains(&y)
    }

    /// Whether a directed path leads from `from` to `to` (inclusive).
    pub fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        let mut stack = vec![from];
        let mut seen = std::collections::BTreeSet::new();
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            if seen.insert(u) {
                stack.extend_from_slice(self.children(u));
            }
        }
        false
    }

    pub(crate) fn add_node(&mut self, id: NodeId, kind: NodeKind) {
        self.kinds.insert(id, kind);
        self.parents.entry(id).or_default();
        self.children.entry(id).or_default();
    }

    pub(crate) fn push_edge(&mut self, x: NodeId, y: NodeId) {
        self.children.entry(x).or_default().push(y);
        self.parents.entry(y).or_default().push(x);
    }

    /// Replaces edge `(x, y)` with `(x, t), (t, y)`, keeping `t` in the list
    /// positions `y` and `x` held.
    pub(crate) fn splice(&mut self, x: NodeId, y: NodeId, t: NodeId, kind: NodeKind) -> Result<(), GraphError> {
        let ci = self
            .children(x)
            .iter()
            .position(|&c| c == y)
            .ok_or(GraphError::MissingEdge(x, y))?;
        let pi = self
            .parents(y)
            .iter()
            .position(|&p| p == x)
            .ok_or(GraphError::MissingEdge(x, y))?;
        self.add_node(t, kind);
        self.children.get_mut(&x).expect("x exists")[ci] = t;
        self.parents.get_mut(&y).expect("y exists")[pi] = t;
        self.parents.get_mut(&t).expect("t exists").push(x);
        self.children.get_mut(&t).expect("t exists").push(y);
        Ok(())
    }

    /// Kahn's algorithm, ties broken by ascending id.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indeg: BTreeMap<NodeId, usize> =
            self.kinds.keys().map(|&id| (id, self.parents(id).len())).collect();
        let mut ready: BinaryHeap<Reverse<NodeId>> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.kinds.len());
        while let Some(Reverse(u)) = ready.pop() {
            order.push(u);
            for &v in self.children(u) {
                let d = indeg.get_mut(&v).expect("child is a node");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(v));
                }
            }
        }
        if order.len() != self.kinds.len() {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }

    pub fn sources(&self) -> Vec<NodeId> {
        self.node_ids().filter(|&id| self.parents(id).is_empty()).collect()
    }

    pub fn variable_linear(&self) -> Option<NodeId> {
        self.kinds
            .iter()
            .find(|(_, k)| matches!(k, NodeKind::Linear { variable: true, .. }))
            .map(|(&id, _)| id)
    }

    /// Whole-graph shape inference in topological order.
    pub fn infer_shapes(&self, check: ShapeCheck) -> Result<ShapeMap, ShapeError> {
        let order = self.topo_order().map_err(|_| ShapeError::Cycle)?;
        let mut shapes: ShapeMap = BTreeMap::new();
        for id in order {
            let kind = &self.kinds[&id];
            let inputs: Vec<Shape> = self.parents(id).iter().map(|p| shapes[p]).collect();
            let out = self.node_shape(id, kind, &inputs, check)?;
            shapes.insert(id, out);
        }
        Ok(shapes)
    }

    fn single_image(&self, id: NodeId, inputs: &[Shape]) -> Result<ImageShape, ShapeError> {
        match inputs {
            [] => Ok(self.input_shape),
            [Shape::Image(s)] => Ok(*s),
            [Shape::Flat(_)] => Err(ShapeError::Structure {
                node: id,
                reason: "image node fed by a flat tensor".into(),
            }),
            _ => Err(ShapeError::Structure {
                node: id,
                reason: format!("{} parents on a single-input node", inputs.len()),
            }),
        }
    }

    fn node_shape(
        &self,
        id: NodeId,
        kind: &NodeKind,
        inputs: &[Shape],
        check: ShapeCheck,
    ) -> Result<Shape, ShapeError> {
        match *kind {
            NodeKind::Conv {
                kernel,
                padded,
                in_ch,
                out_ch,
            } => {
                let s = self.single_image(id, inputs)?;
                if s.c != in_ch {
                    return Err(ShapeError::ChannelMismatch {
                        node: id,
                        expected: in_ch,
                        found: s.c,
                    });
                }
                let pad = same_padding(kernel, padded);
                match (conv_output_dim(s.h, kernel, pad, 1), conv_output_dim(s.w, kernel, pad, 1)) {
                    (Some(h), Some(w)) => Ok(Shape::Image(ImageShape { c: out_ch, h, w })),
                    _ => Err(ShapeError::DegenerateSpatial { node: id }),
                }
            }
            NodeKind::MaxPool { kernel, stride } => {
                if inputs.is_empty() {
                    return Err(ShapeError::Structure {
                        node: id,
                        reason: "pooling node without a parent".into(),
                    });
                }
                let s = self.single_image(id, inputs)?;
                match (conv_output_dim(s.h, kernel, 0, stride), conv_output_dim(s.w, kernel, 0, stride)) {
                    (Some(h), Some(w)) => Ok(Shape::Image(ImageShape { c: s.c, h, w })),
                    _ => Err(ShapeError::DegenerateSpatial { node: id }),
                }
            }
            NodeKind::Combine { mode } => {
                if inputs.len() < 2 {
                    return Err(ShapeError::Structure {
                        node: id,
                        reason: format!("combine node with {} parents", inputs.len()),
                    });
                }
                let imgs: Vec<ImageShape> = inputs
                    .iter()
                    .map(|s| match s {
                        Shape::Image(i) => Ok(*i),
                        Shape::Flat(_) => Err(ShapeError::Structure {
                            node: id,
                            reason: "combine node fed by a flat tensor".into(),
                        }),
                    })
                    .collect::<Result<_, _>>()?;
                let first = imgs[0];
                match mode {
                    CombineMode::Add => {
                        if imgs.iter().any(|s| *s != first) {
                            return Err(ShapeError::AddMismatch {
                                node: id,
                                shapes: imgs,
                            });
                        }
                        Ok(Shape::Image(first))
                    }
                    CombineMode::Concat => {
                        if imgs.iter().any(|s| (s.h, s.w) != (first.h, first.w)) {
                            return Err(ShapeError::ConcatMismatch {
                                node: id,
                                shapes: imgs,
                            });
                        }
                        Ok(Shape::Image(ImageShape {
                            c: imgs.iter().map(|s| s.c).sum(),
                            ..first
                        }))
                    }
                }
            }
            NodeKind::Linear {
                in_dim,
                out_dim,
                variable,
            } => {
                let width = match inputs {
                    [Shape::Image(s)] if variable => {
                        let f = s.flat_len();
                        if check.strict_fc_cap && f > self.fc_width {
                            return Err(ShapeError::FcWidthExceeded {
                                node: id,
                                flatten: f,
                                cap: self.fc_width,
                            });
                        }
                        if check.flexible_flatten {
                            in_dim
                        } else {
                            f
                        }
                    }
                    [Shape::Flat(f)] if !variable => *f,
                    _ => {
                        return Err(ShapeError::Structure {
                            node: id,
                            reason: "linear node must have one parent: an image for the variable \
                                     layer, a flat tensor otherwise"
                                .into(),
                        })
                    }
                };
                if width != in_dim {
                    return Err(ShapeError::ChannelMismatch {
                        node: id,
                        expected: in_dim,
                        found: width,
                    });
                }
                Ok(Shape::Flat(out_dim))
            }
        }
    }
}
