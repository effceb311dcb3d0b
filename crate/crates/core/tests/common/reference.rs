//! Independent reimplementations used as oracles: cycle detection, a
//! per-node forward executor, and random graph growth.

use std::collections::BTreeMap;

use nasgraph::graph::{ImageShape, NASGraph, NodeId, NodeKind, SeedChoice};
use nasgraph::morph::{apply_site, enumerate_sites, InitMode, MorphKind, MorphSite};
use nasgraph::ndt::{combine_forward, conv_block_forward, linear_forward, maxpool_forward, relu_forward, LayerParams, Tensor};
use nasgraph::sched::AgingConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Kahn's algorithm over the edge list; `None` when a cycle exists.
pub fn kahn_order(g: &NASGraph) -> Option<Vec<NodeId>> {
    let ids: Vec<NodeId> = g.node_ids().collect();
    let mut indeg: BTreeMap<NodeId, usize> = ids.iter().map(|&i| (i, 0)).collect();
    let edges = g.edges();
    for &(_, y) in &edges {
        *indeg.get_mut(&y)? += 1;
    }
    let mut ready: Vec<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
    let mut order = Vec::new();
    while let Some(x) = ready.pop() {
        order.push(x);
        for &(a, b) in &edges {
            if a == x {
                let d = indeg.get_mut(&b)?;
                *d -= 1;
                if *d == 0 {
                    ready.push(b);
                }
            }
        }
    }
    (order.len() == ids.len()).then_some(order)
}

/// Eval-mode activations of every node for input `x: [N, C, H, W]`.
pub fn forward_all(g: &NASGraph, x: &Tensor) -> BTreeMap<NodeId, Tensor> {
    let order = kahn_order(g).expect("acyclic");
    let mut acts: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for id in order {
        let parents = g.parents(id);
        let inputs: Vec<&Tensor> = if parents.is_empty() {
            vec![x]
        } else {
            parents.iter().map(|p| &acts[p]).collect()
        };
        let out = match (g.kind(id).unwrap(), g.params(id)) {
            (NodeKind::Conv { padded, .. }, Some(LayerParams::Conv(p))) => {
                conv_block_forward(inputs[0], &mut p.clone(), *padded, false).unwrap().0
            }
            (NodeKind::MaxPool { kernel, stride }, None) => maxpool_forward(inputs[0], *kernel, *stride).unwrap().0,
            (NodeKind::Combine { mode }, None) => combine_forward(&inputs, *mode).unwrap(),
            (NodeKind::Linear { variable, .. }, Some(LayerParams::Linear(p))) => {
                let n = inputs[0].shape()[0];
                let flat = inputs[0].len() / n;
                let y = linear_forward(&inputs[0].clone().reshape(&[n, flat]).unwrap(), p).unwrap();
                if *variable {
                    relu_forward(&y)
                } else {
                    y
                }
            }
            (k, _) => panic!("unexpected node {k:?}"),
        };
        acts.insert(id, out);
    }
    acts
}

pub fn random_input(shape: ImageShape, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, shape.c, shape.h, shape.w], |_| rng.gen_range(-1.0..1.0))
}

/// A small seed with a random input geometry.
pub fn small_seed(rng: &mut ChaCha8Rng) -> NASGraph {
    let shape = ImageShape::new(rng.gen_range(1..4), rng.gen_range(6..17), rng.gen_range(6..17));
    let choice = SeedChoice {
        kernel: [3, 5][rng.gen_range(0..2)],
        padded: rng.gen_bool(0.5),
        channels: [2, 4, 8][rng.gen_range(0..3)],
    };
    NASGraph::seed_with(shape, rng.gen_range(2..6), rng.gen_range(4..17), choice, rng).unwrap()
}

pub const ALL_KINDS: [MorphKind; 5] = [
    MorphKind::Skip,
    MorphKind::Deepen,
    MorphKind::Widen,
    MorphKind::Merge,
    MorphKind::MaxPoolIns,
];

/// Applies up to `steps` random enumerated morphisms.
pub fn grow(g: &mut NASGraph, steps: usize, init: InitMode, rng: &mut ChaCha8Rng) -> Vec<MorphSite> {
    let mut applied = Vec::new();
    for _ in 0..steps {
        let kind = ALL_KINDS[rng.gen_range(0..ALL_KINDS.len())];
        let sites = enumerate_sites(g, kind);
        if sites.is_empty() {
            continue;
        }
        let site = sites[rng.gen_range(0..sites.len())];
        apply_site(g, &site, init, &AgingConfig::default(), rng).unwrap();
        applied.push(site);
    }
    applied
}
