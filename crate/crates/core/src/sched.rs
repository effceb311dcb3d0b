//! Learning-rate machinery: the cosine-annealed SGDR schedule and the
//! gradient-stopping multipliers that age layers by their graph distance from
//! the most recently inserted convolution.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NASGraph, NodeId};
use crate::morph::MorphKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("step {t} outside schedule [0, {total}]")]
    StepOutOfRange { t: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("deepen requires the inserted node, other morphisms take none")]
    NewNodeMismatch,
}

/// One cosine cycle from `lambda_start` to `lambda_end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdrSchedule {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub total_steps: usize,
}

impl SgdrSchedule {
    pub fn new(lambda_start: f64, lambda_end: f64, total_steps: usize) -> Result<Self, SchedError> {
        if !(lambda_end >= 0.0 && lambda_start >= lambda_end) {
            return Err(SchedError::Invalid(format!(
                "need lambda_start >= lambda_end >= 0, got {lambda_start} / {lambda_end}"
            )));
        }
        if total_steps == 0 {
            return Err(SchedError::Invalid("total steps must be >= 1".into()));
        }
        Ok(Self {
            lambda_start,
            lambda_end,
            total_steps,
        })
    }
}

/// `lambda_end + (lambda_start - lambda_end) * (1 + cos(pi * t / T)) / 2`.
pub fn sgdr_lr(t: usize, s: &SgdrSchedule) -> Result<f64, SchedError> {
    if t > s.total_steps {
        return Err(SchedError::StepOutOfRange {
            t,
            total: s.total_steps,
        });
    }
    // exact endpoints; the cosine form leaves ~1e-17 residue at t = T
    if t == 0 {
        return Ok(s.lambda_start);
    }
    if t == s.total_steps {
        return Ok(s.lambda_end);
    }
    let phase = std::f64::consts::PI * t as f64 / s.total_steps as f64;
    Ok(s.lambda_end + 0.5 * (s.lambda_start - s.lambda_end) * (1.0 + phase.cos()))
}

pub fn effective_lr(t: usize, s: &SgdrSchedule, node_alpha: f64) -> Result<f64, SchedError> {
    Ok(sgdr_lr(t, s)? * node_alpha.clamp(0.0, 1.0))
}

/// Shape of the gradient-stopping curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgingConfig {
    /// Nodes farther than this stop training.
    pub cutoff: usize,
    pub sigma: f64,
    /// Numerator of the normal-curve prefactor `scale / (sqrt(2 pi) * sigma)`.
    pub scale: f64,
}

impl Default for AgingConfig {
    fn default() -> Self {
        Self {
            cutoff: 6,
            sigma: 2.4,
            scale: 6.0,
        }
    }
}

pub fn aging_multiplier(d: usize) -> f64 {
    aging_multiplier_with(d, &AgingConfig::default())
}

pub fn aging_multiplier_with(d: usize, cfg: &AgingConfig) -> f64 {
    if d > cfg.cutoff {
        return 0.0;
    }
    let x = d as f64;
    let prefactor = cfg.scale / ((2.0 * std::f64::consts::PI).sqrt() * cfg.sigma);
    (prefactor * (-(x * x) / (2.0 * cfg.sigma * cfg.sigma)).exp()).clamp(0.0, 1.0)
}

/// Per-node learning-rate multipliers. Nodes absent from the map train at 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgingState {
    alpha: BTreeMap<NodeId, f64>,
    frozen: BTreeSet<NodeId>,
}

impl AgingState {
    pub fn alpha(&self, id: NodeId) -> f64 {
        self.alpha.get(&id).copied().unwrap_or(1.0)
    }

    pub fn is_frozen(&self, id: NodeId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn frozen(&self) -> &BTreeSet<NodeId> {
        &self.frozen
    }

    pub fn multipliers(&self) -> &BTreeMap<NodeId, f64> {
        &self.alpha
    }

    pub fn reset(&mut self) {
        self.alpha.clear();
        self.frozen.clear();
    }

    pub fn set(&mut self, id: NodeId, alpha: f64) {
        let alpha = alpha.clamp(0.0, 1.0);
        self.alpha.insert(id, alpha);
        if alpha == 0.0 {
            self.frozen.insert(id);
        } else {
            self.frozen.remove(&id);
        }
    }

    pub fn remove(&mut self, id: NodeId) {
        self.alpha.remove(&id);
        self.frozen.remove(&id);
    }
}

/// Hop distance from `origin` over the undirected graph.
pub fn node_distances(g: &NASGraph, origin: NodeId) -> BTreeMap<NodeId, usize> {
    let mut dist = BTreeMap::new();
    if !g.contains(origin) {
        return dist;
    }
    dist.insert(origin, 0);
    let mut queue = VecDeque::from([origin]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        for &v in g.parents(u).iter().chain(g.children(u)) {
            if !dist.contains_key(&v) {
                dist.insert(v, d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Updates aging after a morphism. A deepen re-derives every parameterized
/// node's multiplier from its distance to the inserted node (overwriting any
/// earlier state); every other morphism unfreezes the whole graph.
pub fn on_morphism(
    state: &mut AgingState,
    kind: MorphKind,
    g: &NASGraph,
    new_node: Option<NodeId>,
    cfg: &AgingConfig,
) -> Result<(), SchedError> {
    match (kind, new_node) {
        (MorphKind::Deepen, Some(origin)) => {
            state.reset();
            for (id, d) in node_distances(g, origin) {
                if g.kind(id).map_or(false, |k| k.has_params()) {
                    state.set(id, aging_multiplier_with(d, cfg));
                }
            }
            Ok(())
        }
        (MorphKind::Deepen, None) => Err(SchedError::NewNodeMismatch),
        (_, None) => {
            state.reset();
            Ok(())
        }
        (_, Some(_)) => Err(SchedError::NewNodeMismatch),
    }
}
