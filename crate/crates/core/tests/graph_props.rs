mod common;

use std::collections::BTreeSet;

use common::reference::{grow, kahn_order, small_seed};
use dot_parser::{ast, canonical};
use nasgraph::graph::{decode_checkpoint, deserialize, encode_checkpoint, serialize, NASGraph, NodeId, NodeKind};
use nasgraph::morph::{random_morph_sequence, replay, InitMode, MorphLog};
use nasgraph::sched::AgingConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grown(seed: u64, steps: usize) -> NASGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = small_seed(&mut rng);
    grow(&mut g, steps, InitMode::Default, &mut rng);
    g
}

fn with_log(seed: u64, steps: usize) -> (NASGraph, NASGraph, MorphLog) {
    let parent = grown(seed, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out = random_morph_sequence(&parent, 3, InitMode::ZeroOne, &AgingConfig::default(), &mut rng).unwrap();
    (parent, out.child, out.log)
}

fn graph_args() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 0usize..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialization_round_trips((seed, steps) in graph_args()) {
        let g = grown(seed, steps);
        let bytes = serialize(&g);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn checkpoint_round_trips_with_log((seed, steps) in graph_args()) {
        let (parent, child, log) = with_log(seed, steps);
        let (g, decoded) = decode_checkpoint(&encode_checkpoint(&child, Some(&log))).unwrap();
        prop_assert_eq!(&g, &child);
        let decoded = decoded.unwrap();
        prop_assert_eq!(&decoded, &log);
        prop_assert_eq!(replay(&parent, &decoded).unwrap(), child);
    }

    #[test]
    fn corrupted_checkpoints_never_panic(
        (seed, steps) in graph_args(),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4),
        cut in any::<prop::sample::Index>(),
        truncate in any::<bool>(),
    ) {
        let (_, child, log) = with_log(seed, steps);
        let mut bytes = encode_checkpoint(&child, Some(&log));
        for (at, v) in flips {
            let i = at.index(bytes.len());
            bytes[i] ^= v;
        }
        if truncate {
            bytes.truncate(cut.index(bytes.len()));
        }
        if let Ok((g, _)) = decode_checkpoint(&bytes) {
            // Whatever survives decoding is a valid graph.
            prop_assert!(g.validate().is_ok());
            prop_assert!(kahn_order(&g).is_some());
        }
    }

    #[test]
    fn dot_parses_to_the_same_graph((seed, steps) in graph_args()) {
        let g = grown(seed, steps);
        let dot = g.to_dot();
        let parsed = canonical::Graph::from(ast::Graph::try_from(dot.as_str()).unwrap());
        prop_assert!(parsed.is_digraph);
        let names: BTreeSet<String> = g.node_ids().map(|i| g.name(i)).collect();
        let parsed_names: BTreeSet<String> = parsed.nodes.set.keys().cloned().collect();
        prop_assert_eq!(parsed_names, names);
        let edges: BTreeSet<(String, String)> = g.edges().iter().map(|&(x, y)| (g.name(x), g.name(y))).collect();
        let parsed_edges: BTreeSet<(String, String)> =
            parsed.edges.set.iter().map(|e| (e.from.clone(), e.to.clone())).collect();
        prop_assert_eq!(parsed.edges.set.len(), g.edges().len());
        prop_assert_eq!(parsed_edges, edges);
    }

    #[test]
    fn connect_rejects_cycles_and_leaves_the_graph_alone(
        (seed, steps) in graph_args(),
        picks in prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 1..20),
    ) {
        let mut g = grown(seed, steps);
        let ids: Vec<NodeId> = g.node_ids().collect();
        for (a, b) in picks {
            let (x, y) = (ids[a.index(ids.len())], ids[b.index(ids.len())]);
            let before = g.clone();
            match g.connect(x, y) {
                Ok(()) => {
                    let combine = matches!(g.kind(y), Some(NodeKind::Combine { .. }));
                    prop_assert!(combine);
                    prop_assert!(kahn_order(&g).is_some());
                    prop_assert!(g.position(x).unwrap() < g.position(y).unwrap());
                }
                Err(_) => prop_assert_eq!(&g, &before),
            }
        }
    }

    #[test]
    fn topological_order_is_consistent((seed, steps) in graph_args()) {
        let g = grown(seed, steps);
        let order = g.topo_order();
        prop_assert_eq!(order.len(), g.node_count());
        for (i, &id) in order.iter().enumerate() {
            prop_assert_eq!(g.position(id), Some(i));
        }
        for (x, y) in g.edges() {
            prop_assert!(g.children(x).contains(&y));
            prop_assert!(g.parents(y).contains(&x));
        }
    }
}
