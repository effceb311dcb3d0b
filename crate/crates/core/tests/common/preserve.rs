//! Output comparisons before and after morphisms on randomized graphs.

use nasgraph::graph::{NASGraph, Network};
use nasgraph::morph::{apply_site, enumerate_sites, widen_flatten_source, InitMode, MorphKind};
use nasgraph::ndt::{LayerParams, Tensor};
use nasgraph::sched::AgingConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{grow, random_input, small_seed};

pub const INPUTS: usize = 100;
pub const TOL: f32 = 1e-5;

/// Non-trivial batch-norm statistics and affine terms everywhere, so that
/// preservation cannot lean on identity normalisation.
pub fn perturb_norms(g: &mut NASGraph, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = g.node_ids().collect();
    for id in ids {
        if let Some(LayerParams::Conv(p)) = g.params_mut(id) {
            let c = p.gamma.len();
            p.gamma = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5));
            p.beta = Tensor::from_fn(&[c], |_| rng.gen_range(-0.5..0.5));
            p.running_mean = Tensor::from_fn(&[c], |_| rng.gen_range(-0.5..0.5));
            p.running_var = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..2.0));
        }
    }
}

/// One Deepen, so that the graph has a conv chain to widen.
pub fn deepen(g: &mut NASGraph, rng: &mut ChaCha8Rng) {
    let sites = enumerate_sites(g, MorphKind::Deepen);
    let site = sites[rng.gen_range(0..sites.len())];
    apply_site(g, &site, InitMode::Default, &AgingConfig::default(), rng).unwrap();
}

pub fn logits(g: &NASGraph, x: &Tensor) -> Tensor {
    Network::build(g).unwrap().predict(x).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Largest logit change over every Widen and Merge site of grown graphs.
pub fn worst_site_change(init: InitMode, graphs: usize, seed: u64) -> (f32, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut sites) = (0f32, 0);
    for round in 0..graphs {
        let mut g = small_seed(&mut rng);
        deepen(&mut g, &mut rng);
        grow(&mut g, round % 6, InitMode::Default, &mut rng);
        perturb_norms(&mut g, &mut rng);
        let x = random_input(g.input_shape(), INPUTS, &mut rng);
        let before = logits(&g, &x);
        for kind in [MorphKind::Widen, MorphKind::Merge] {
            for site in enumerate_sites(&g, kind) {
                let mut child = g.clone();
                apply_site(&mut child, &site, init, &AgingConfig::default(), &mut rng).unwrap();
                worst = worst.max(max_abs_diff(&before, &logits(&child, &x)));
                sites += 1;
            }
        }
    }
    (worst, sites)
}


/// Largest logit change from growing the flatten source in ZeroOne mode,
/// and how many graphs allowed it.
pub fn worst_flatten_change(graphs: usize, seed: u64) -> (f32, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut applied) = (0f32, 0);
    for round in 0..graphs {
        let mut g = small_seed(&mut rng);
        grow(&mut g, round % 4, InitMode::Default, &mut rng);
        perturb_norms(&mut g, &mut rng);
        let x = random_input(g.input_shape(), INPUTS, &mut rng);
        let before = logits(&g, &x);
        let mut child = g.clone();
        let factor = [2, 4][round % 2];
        let Ok(a) = widen_flatten_source(&mut child, factor, InitMode::ZeroOne, &mut rng) else {
            continue;
        };
        assert!(a.linear_resized);
        worst = worst.max(max_abs_diff(&before, &logits(&child, &x)));
        applied += 1;
    }
    (worst, applied)
}
