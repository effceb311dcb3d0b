use std::collections::BTreeMap;
use std::mem;

use super::{GraphError, NASGraph, NodeId, NodeKind};
use crate::ndt::{
    combine_backward, combine_forward, conv_block_backward, conv_block_forward, linear_backward,
    linear_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, CombineMode,
    ConvBlockCache, ConvBlockParams, LayerParams, LinearParams, MaxPoolCache, Parameter, Tensor,
};
use crate::sched::AgingState;

struct ConvLayer {
    padded: bool,
    weight: Parameter,
    bias: Parameter,
    gamma: Parameter,
    beta: Parameter,
    running_mean: Tensor,
    running_var: Tensor,
    cache: Option<ConvBlockCache>,
}

impl ConvLayer {
    fn with_params<R>(&mut self, f: impl FnOnce(&mut ConvBlockParams) -> R) -> R {
        let mut p = ConvBlockParams {
            weight: mem::take(&mut self.weight.value),
            bias: mem::take(&mut self.bias.value),
            gamma: mem::take(&mut self.gamma.value),
            beta: mem::take(&mut self.beta.value),
            running_mean: mem::take(&mut self.running_mean),
            running_var: mem::take(&mut self.running_var),
        };
        let r = f(&mut p);
        self.weight.value = p.weight;
        self.bias.value = p.bias;
        self.gamma.value = p.gamma;
        self.beta.value = p.beta;
        self.running_mean = p.running_mean;
        self.running_var = p.running_var;
        r
    }
}

struct LinearLayer {
    relu: bool,
    weight: Parameter,
    bias: Parameter,
    /// Flattened input and (post-activation) output of the last forward.
    saved: Option<(Tensor, Vec<usize>, Tensor)>,
}

impl LinearLayer {
    fn with_params<R>(&mut self, f: impl FnOnce(&LinearParams) -> R) -> R {
        let p = LinearParams {
            weight: mem::take(&mut self.weight.value),
            bias: mem::take(&mut self.bias.value),
        };
        let r = f(&p);
        self.weight.value = p.weight;
        self.bias.value = p.bias;
        r
    }
}

enum Layer {
    Conv(ConvLayer),
    Pool {
        kernel: usize,
        stride: usize,
        cache: Option<MaxPoolCache>,
    },
    Combine {
        mode: CombineMode,
        input_shapes: Option<Vec<Vec<usize>>>,
    },
    Linear(LinearLayer),
}

/// Executable form of a graph: kernels wired in topological order with
/// trainable [`Parameter`]s. Weights are copied in at build time and copied
/// back with [`Network::write_back`].
pub struct Network {
    order: Vec<NodeId>,
    parents: BTreeMap<NodeId, Vec<NodeId>>,
    children_count: BTreeMap<NodeId, usize>,
    layers: BTreeMap<NodeId, Layer>,
    recorded: bool,
}

impl Network {
    pub fn build(g: &NASGraph) -> Result<Self, GraphError> {
        g.infer_shapes()?;
        let mut layers = BTreeMap::new();
        for &id in g.topo_order() {
            let kind = g.kind(id).ok_or(GraphError::UnknownNode(id))?;
            let layer = match (kind, g.params(id)) {
                (NodeKind::Conv { padded, .. }, Some(LayerParams::Conv(p))) => Layer::Conv(ConvLayer {
                    padded: *padded,
                    weight: Parameter::new(p.weight.clone()),
                    bias: Parameter::new(p.bias.clone()),
                    gamma: Parameter::new(p.gamma.clone()),
                    beta: Parameter::new(p.beta.clone()),
                    running_mean: p.running_mean.clone(),
                    running_var: p.running_var.clone(),
                    cache: None,
                }),
                (NodeKind::MaxPool { kernel, stride }, None) => Layer::Pool {
                    kernel: *kernel,
                    stride: *stride,
                    cache: None,
                },
                (NodeKind::Combine { mode }, None) => Layer::Combine {
                    mode: *mode,
                    input_shapes: None,
                },
                (NodeKind::Linear { variable, .. }, Some(LayerParams::Linear(p))) => {
                    Layer::Linear(LinearLayer {
                        relu: *variable,
                        weight: Parameter::new(p.weight.clone()),
                        bias: Parameter::new(p.bias.clone()),
                        saved: None,
                    })
                }
                _ => {
                    return Err(GraphError::Input(format!(
                        "{} has parameters inconsistent with its kind",
                        g.name(id)
                    )))
                }
            };
            layers.insert(id, layer);
        }
        let mut net = Self {
            order: g.topo_order().to_vec(),
            parents: g.node_ids().map(|id| (id, g.parents(id).to_vec())).collect(),
            children_count: g.node_ids().map(|id| (id, g.children(id).len())).collect(),
            layers,
            recorded: false,
        };
        net.apply_aging(g.aging());
        Ok(net)
    }

    /// Sets every parameter's learning-rate multiplier from the aging state.
    pub fn apply_aging(&mut self, aging: &AgingState) {
        for (&id, layer) in &mut self.layers {
            let m = aging.alpha(id) as f32;
            for p in layer_params_mut(layer) {
                p.set_lr_multiplier(m);
            }
        }
    }

    /// Resets every multiplier to 1.
    pub fn clear_aging(&mut self) {
        self.apply_aging(&AgingState::default());
    }

    /// Parameters in node-id order, then weight, bias, gamma, beta.
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.values_mut().flat_map(layer_params_mut).collect()
    }

    pub fn parameters(&self) -> Vec<(NodeId, &Parameter)> {
        self.layers
            .iter()
            .flat_map(|(&id, l)| {
                let ps: Vec<&Parameter> = match l {
                    Layer::Conv(c) => vec![&c.weight, &c.bias, &c.gamma, &c.beta],
                    Layer::Linear(lin) => vec![&lin.weight, &lin.bias],
                    _ => vec![],
                };
                ps.into_iter().map(move |p| (id, p))
            })
            .collect()
    }

    /// Forward pass recording what the backward pass needs.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor, GraphError> {
        self.run(x, training, true)
    }

    /// Eval-mode forward without recording.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor, GraphError> {
        self.run(x, false, false)
    }

    fn run(&mut self, x: &Tensor, training: bool, record: bool) -> Result<Tensor, GraphError> {
        let mut acts: BTreeMap<NodeId, Tensor> = BTreeMap::new();
        let mut pending = self.children_count.clone();
        let mut last = None;
        for &id in &self.order {
            let parent_ids = &self.parents[&id];
            let inputs: Vec<&Tensor> = if parent_ids.is_empty() {
                vec![x]
            } else {
                parent_ids.iter().map(|p| &acts[p]).collect()
            };
            let layer = self.layers.get_mut(&id).expect("layer per node");
            let out = match layer {
                Layer::Conv(c) => {
                    let padded = c.padded;
                    let (y, cache) = c.with_params(|p| conv_block_forward(inputs[0], p, padded, training))?;
                    if record {
                        c.cache = Some(cache);
                    }
                    y
                }
                Layer::Pool { kernel, stride, cache } => {
                    let (y, ch) = maxpool_forward(inputs[0], *kernel, *stride)?;
                    if record {
                        *cache = Some(ch);
                    }
                    y
                }
                Layer::Combine { mode, input_shapes } => {
                    let y = combine_forward(&inputs, *mode)?;
                    if record {
                        *input_shapes = Some(inputs.iter().map(|t| t.shape().to_vec()).collect());
                    }
                    y
                }
                Layer::Linear(lin) => {
                    let src = inputs[0];
                    let n = src.shape()[0];
                    let per = src.len() / n;
                    let flat = src.clone().reshape(&[n, per])?;
                    let z = lin.with_params(|p| linear_forward(&flat, p))?;
                    let y = if lin.relu { relu_forward(&z) } else { z };
                    if record {
                        lin.saved = Some((flat, src.shape().to_vec(), y.clone()));
                    }
                    y
                }
            };
            for p in parent_ids {
                let left = pending.get_mut(p).expect("parent tracked");
                *left -= 1;
                if *left == 0 {
                    acts.remove(p);
                }
            }
            last = Some(id);
            acts.insert(id, out);
        }
        self.recorded = record;
        let sink = last.ok_or_else(|| GraphError::Usage("empty network".into()))?;
        Ok(acts.remove(&sink).expect("sink output"))
    }

    /// Reverse-mode pass from `d_logits`; overwrites every parameter's grad.
    pub fn backward(&mut self, d_logits: &Tensor) -> Result<(), GraphError> {
        if !self.recorded {
            return Err(GraphError::Usage("backward called without a recorded forward pass".into()));
        }
        self.recorded = false;
        let mut grads: BTreeMap<NodeId, Tensor> = BTreeMap::new();
        let sink = *self.order.last().expect("non-empty");
        grads.insert(sink, d_logits.clone());
        for &id in self.order.iter().rev() {
            let d_out = match grads.remove(&id) {
                Some(g) => g,
                None => continue,
            };
            let layer = self.layers.get_mut(&id).expect("layer per node");
            let d_inputs: Vec<Tensor> = match layer {
                Layer::Conv(c) => {
                    let cache = c.cache.take().ok_or_else(missing_cache)?;
                    let (dx, g) = c.with_params(|p| conv_block_backward(&d_out, p, &cache))?;
                    c.weight.grad = g.weight;
                    c.bias.grad = g.bias;
                    c.gamma.grad = g.gamma;
                    c.beta.grad = g.beta;
                    vec![dx]
                }
                Layer::Pool { cache, .. } => {
                    let cache = cache.take().ok_or_else(missing_cache)?;
                    vec![maxpool_backward(&d_out, &cache)?]
                }
                Layer::Combine { mode, input_shapes } => {
                    let shapes = input_shapes.take().ok_or_else(missing_cache)?;
                    combine_backward(&d_out, &shapes, *mode)?
                }
                Layer::Linear(lin) => {
                    let (flat, in_shape, y) = lin.saved.take().ok_or_else(missing_cache)?;
                    let dz = if lin.relu { relu_backward(&d_out, &y) } else { d_out };
                    let (dx, g) = lin.with_params(|p| linear_backward(&dz, &flat, p))?;
                    lin.weight.grad = g.weight;
                    lin.bias.grad = g.bias;
                    vec![dx.reshape(&in_shape)?]
                }
            };
            for (p, d) in self.parents[&id].iter().zip(d_inputs) {
                match grads.get_mut(p) {
                    Some(acc) => acc.add_assign(&d)?,
                    None => {
                        grads.insert(*p, d);
                    }
                }
            }
        }
        Ok(())
    }

    /// Copies weights and batch-norm statistics back into `g`.
    pub fn write_back(&self, g: &mut NASGraph) -> Result<(), GraphError> {
        for (&id, layer) in &self.layers {
            let p = match layer {
                Layer::Conv(c) => LayerParams::Conv(ConvBlockParams {
                    weight: c.weight.value.clone(),
                    bias: c.bias.value.clone(),
                    gamma: c.gamma.value.clone(),
                    beta: c.beta.value.clone(),
                    running_mean: c.running_mean.clone(),
                    running_var: c.running_var.clone(),
                }),
                Layer::Linear(l) => LayerParams::Linear(LinearParams {
                    weight: l.weight.value.clone(),
                    bias: l.bias.value.clone(),
                }),
                _ => continue,
            };
            let kind = g.kind(id).ok_or(GraphError::UnknownNode(id))?;
            if !kind.params_match(Some(&p)) {
                return Err(GraphError::Usage(format!("{} changed shape since build", g.name(id))));
            }
            g.set_params(id, p);
        }
        Ok(())
    }
}

fn missing_cache() -> GraphError {
    GraphError::Usage("backward called without a recorded forward pass".into())
}

fn layer_params_mut(layer: &mut Layer) -> Vec<&mut Parameter> {
    match layer {
        Layer::Conv(c) => vec![&mut c.weight, &mut c.bias, &mut c.gamma, &mut c.beta],
        Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
        _ => vec![],
    }
}
