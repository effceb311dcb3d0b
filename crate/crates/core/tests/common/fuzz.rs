//! Random morphism applications with per-step invariant checks.

use std::collections::BTreeSet;

use nasgraph::graph::{NASGraph, NodeId, Shape};
use nasgraph::morph::{apply_site, enumerate_sites, InitMode, MorphSite};
use nasgraph::ndt::Tensor;
use nasgraph::sched::AgingConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{forward_all, kahn_order, random_input, small_seed, ALL_KINDS};

pub const PARAM_BUDGET: usize = 400_000;

/// Values of `old` inside the index box shared with `new` are bit-identical.
fn common_block_equal(old: &Tensor, new: &Tensor) -> bool {
    if old.shape().len() != new.shape().len() {
        return false;
    }
    let dims: Vec<usize> = old.shape().iter().zip(new.shape()).map(|(a, b)| *a.min(b)).collect();
    let total: usize = dims.iter().product();
    let strides = |s: &[usize]| {
        let mut st = vec![1; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            st[i] = st[i + 1] * s[i + 1];
        }
        st
    };
    let (so, sn) = (strides(old.shape()), strides(new.shape()));
    (0..total).all(|mut flat| {
        let (mut io, mut inew) = (0, 0);
        for d in (0..dims.len()).rev() {
            let idx = flat % dims[d];
            flat /= dims[d];
            io += idx * so[d];
            inew += idx * sn[d];
        }
        old.data()[io].to_bits() == new.data()[inew].to_bits()
    })
}

/// Nodes whose tensors a site may legitimately resize.
fn resizable(before: &NASGraph, site: &MorphSite) -> BTreeSet<NodeId> {
    let mut s = BTreeSet::from([before.variable_linear()]);
    match *site {
        MorphSite::Widen { x, y, .. } => {
            s.insert(x);
            s.insert(y);
        }
        MorphSite::Merge { b, .. } => {
            s.insert(b);
        }
        _ => {}
    }
    s
}

/// Describes every surviving tensor value that changed.
fn mutations(before: &NASGraph, after: &NASGraph, site: &MorphSite) -> Vec<String> {
    let mut out = Vec::new();
    let open = resizable(before, site);
    for id in before.node_ids() {
        if !after.contains(id) {
            out.push(format!("{id} removed"));
            continue;
        }
        let (Some(old), Some(new)) = (before.params(id), after.params(id)) else {
            if before.params(id).is_some() != after.params(id).is_some() {
                out.push(format!("{id} gained or lost parameters"));
            }
            continue;
        };
        for ((name, o), (_, n)) in old.tensors().into_iter().zip(new.tensors()) {
            let same_shape = o.shape() == n.shape();
            if (!open.contains(&id) && !same_shape) || !common_block_equal(o, n) {
                out.push(format!("{id}.{name} after {site:?}"));
            }
        }
    }
    out
}

/// Kahn order exists and the cached order respects every edge.
pub fn acyclic(g: &NASGraph) -> bool {
    kahn_order(g).is_some()
        && g
            .edges()
            .iter()
            .all(|&(x, y)| g.position(x).unwrap() < g.position(y).unwrap())
}

fn shapes_match_forward(g: &NASGraph, rng: &mut ChaCha8Rng) -> bool {
    let shapes = g.infer_shapes().unwrap();
    let acts = forward_all(g, &random_input(g.input_shape(), 2, rng));
    acts.iter().all(|(id, t)| {
        let want = match shapes[id] {
            Shape::Image(s) => vec![2, s.c, s.h, s.w],
            Shape::Flat(n) => vec![2, n],
        };
        t.shape() == want
    })
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub applied: usize,
    pub per_kind: [usize; 5],
    pub cycles: usize,
    pub shape_failures: usize,
    pub rejected: usize,
    pub forward_mismatch: usize,
    pub mutated: Vec<String>,
}

impl FuzzReport {
    pub fn clean(&self) -> bool {
        self.cycles == 0
            && self.shape_failures == 0
            && self.rejected == 0
            && self.forward_mismatch == 0
            && self.mutated.is_empty()
    }
}

/// Applies random enumerated sites to random seeds until `applications`
/// succeed. Episodes restart after 25 steps or past `PARAM_BUDGET`.
pub fn fuzz(applications: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = FuzzReport::default();
    while r.applied < applications {
        let mut g = small_seed(&mut rng);
        let init = if rng.gen_bool(0.5) { InitMode::Default } else { InitMode::ZeroOne };
        for _ in 0..25 {
            if g.parameter_count() > PARAM_BUDGET {
                break;
            }
            let k = rng.gen_range(0..ALL_KINDS.len());
            let sites = enumerate_sites(&g, ALL_KINDS[k]);
            if sites.is_empty() {
                continue;
            }
            let site = sites[rng.gen_range(0..sites.len())];
            let before = g.clone();
            if apply_site(&mut g, &site, init, &AgingConfig::default(), &mut rng).is_err() {
                r.rejected += 1;
                g = before;
                continue;
            }
            r.applied += 1;
            r.per_kind[k] += 1;
            if !acyclic(&g) {
                r.cycles += 1;
            }
            if g.infer_shapes().is_err() {
                r.shape_failures += 1;
                break;
            }
            r.mutated.extend(mutations(&before, &g, &site));
            if r.applied % 10 == 0 && !shapes_match_forward(&g, &mut rng) {
                r.forward_mismatch += 1;
            }
        }
    }
    r
}
