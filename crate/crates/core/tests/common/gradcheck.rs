//! Analytic backward passes against a 64-bit central-difference oracle.
//!
//! Each case draws its data in f64, runs forward and backward in the
//! precision under test, and compares with finite differences of the f64
//! forward pass. The objective contracts the layer output with a fixed
//! random tensor `r`, so the analytic gradient is the backward pass fed
//! `d_out = r`. Error per tensor is `|a - n| / max(|a|, |n|, floor)` in the
//! L2 norm, with `floor` a small fraction of the case's largest gradient so
//! that gradients which are zero in exact arithmetic (a bias ahead of batch
//! norm) are judged against the layer's scale.

use nasgraph::ndt::{
    combine_backward, combine_forward, conv_block_backward, conv_block_forward, cross_entropy_loss,
    linear_backward, linear_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, CombineMode,
    ConvBlockParams, Element, LinearParams, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LayerKind {
    ConvBlock,
    MaxPool,
    Linear,
    Relu,
    Add,
    Concat,
    CrossEntropy,
}

pub const LAYER_KINDS: [LayerKind; 7] = [
    LayerKind::ConvBlock,
    LayerKind::MaxPool,
    LayerKind::Linear,
    LayerKind::Relu,
    LayerKind::Add,
    LayerKind::Concat,
    LayerKind::CrossEntropy,
];

const STEP: f64 = 1e-6;
const FLOOR_FRACTION: f64 = 1e-2;
const FLOOR_MIN: f64 = 1e-9;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// Worst tensor error of one case given `(analytic, numeric)` pairs.
fn worst(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let scale = pairs.iter().map(|(a, _)| norm(a)).fold(0.0, f64::max);
    let floor = (FLOOR_FRACTION * scale).max(FLOOR_MIN);
    pairs.iter().map(|(a, n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}

/// Central-difference gradient of `f(state)` w.r.t. the slice `slot` selects.
fn numeric<S: Clone>(state: &S, slot: impl Fn(&mut S) -> &mut [f64], f: impl Fn(&S) -> f64) -> Vec<f64> {
    let n = slot(&mut state.clone()).len();
    (0..n)
        .map(|i| {
            let eval = |delta: f64| {
                let mut s = state.clone();
                slot(&mut s)[i] += delta;
                f(&s)
            };
            (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
        })
        .collect()
}

fn wide<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

#[derive(Clone)]
struct ConvState {
    x: Tensor<f64>,
    p: ConvBlockParams<f64>,
}

fn check_conv<T: Element>(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..4);
    let cin = rng.gen_range(1..4);
    let cout = rng.gen_range(1..4);
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let padded = rng.gen_bool(0.5);
    let h = rng.gen_range(k.max(3)..k.max(3) + 3);
    let mut p = ConvBlockParams::<f64>::zeros(cin, cout, k);
    p.weight = randn(p.weight.shape(), rng);
    p.bias = randn(&[cout], rng);
    p.gamma = uniform(&[cout], 0.5, 1.5, rng);
    p.beta = randn(&[cout], rng);
    let s = ConvState {
        x: randn(&[n, cin, h, h], rng),
        p,
    };
    let f = |s: &ConvState| {
        let mut p = s.p.clone();
        conv_block_forward(&s.x, &mut p, padded, true).unwrap().0
    };
    let r = randn(f(&s).shape(), rng);
    let obj = |s: &ConvState| dot(&f(s), &r);

    let mut pt: ConvBlockParams<T> = s.p.cast();
    let (_, cache) = conv_block_forward(&s.x.cast::<T>(), &mut pt, padded, true).unwrap();
    let (dx, g) = conv_block_backward(&r.cast::<T>(), &s.p.cast(), &cache).unwrap();
    worst(&[
        (wide(&dx), numeric(&s, |s| s.x.data_mut(), obj)),
        (wide(&g.weight), numeric(&s, |s| s.p.weight.data_mut(), obj)),
        (wide(&g.bias), numeric(&s, |s| s.p.bias.data_mut(), obj)),
        (wide(&g.gamma), numeric(&s, |s| s.p.gamma.data_mut(), obj)),
        (wide(&g.beta), numeric(&s, |s| s.p.beta.data_mut(), obj)),
    ])
}

fn check_pool<T: Element>(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.gen_range(2..4);
    let stride = rng.gen_range(1..=k);
    let h = rng.gen_range(k..k + 4);
    // Distinct values, so the argmax of every window is unambiguous.
    let shape = [rng.gen_range(1..3), rng.gen_range(1..3), h, h];
    let mut ranks: Vec<usize> = (0..shape.iter().product()).collect();
    ranks.shuffle(rng);
    let x = Tensor::from_vec(&shape, ranks.iter().map(|&r| r as f64 * 0.05 - 1.0).collect()).unwrap();
    let (out, cache) = maxpool_forward(&x.cast::<T>(), k, stride).unwrap();
    let r = randn(out.shape(), rng);
    let dx = maxpool_backward(&r.cast::<T>(), &cache).unwrap();
    let num = numeric(&x, |x| x.data_mut(), |x| dot(&maxpool_forward(x, k, stride).unwrap().0, &r));
    worst(&[(wide(&dx), num)])
}

#[derive(Clone)]
struct LinState {
    x: Tensor<f64>,
    p: LinearParams<f64>,
}

fn check_linear<T: Element>(rng: &mut ChaCha8Rng) -> f64 {
    let (n, fin, fout) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..6));
    let s = LinState {
        x: randn(&[n, fin], rng),
        p: LinearParams {
            weight: randn(&[fin, fout], rng),
            bias: randn(&[fout], rng),
        },
    };
    let r = randn(&[n, fout], rng);
    let obj = |s: &LinState| dot(&linear_forward(&s.x, &s.p).unwrap(), &r);
    let (dx, g) = linear_backward(&r.cast::<T>(), &s.x.cast::<T>(), &s.p.cast()).unwrap();
    worst(&[
        (wide(&dx), numeric(&s, |s| s.x.data_mut(), obj)),
        (wide(&g.weight), numeric(&s, |s| s.p.weight.data_mut(), obj)),
        (wide(&g.bias), numeric(&s, |s| s.p.bias.data_mut(), obj)),
    ])
}

fn check_relu<T: Element>(rng: &mut ChaCha8Rng) -> f64 {
    // Inputs stay clear of the kink.
    let x = Tensor::from_fn(&[rng.gen_range(1..4), rng.gen_range(1..9)], |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let r = randn(x.shape(), rng);
    let out = relu_forward(&x.cast::<T>());
    let dx = relu_backward(&r.cast::<T>(), &out);
    let num = numeric(&x, |x| x.data_mut(), |x| dot(&relu_forward(x), &r));
    worst(&[(wide(&dx), num)])
}

fn check_combine<T: Element>(mode: CombineMode, rng: &mut ChaCha8Rng) -> f64 {
    let (n, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let arity = rng.gen_range(2..4);
    let c = rng.gen_range(1..4);
    let xs: Vec<Tensor<f64>> = (0..arity)
        .map(|_| {
            let ci = if mode == CombineMode::Concat { rng.gen_range(1..4) } else { c };
            randn(&[n, ci, h, w], rng)
        })
        .collect();
    let f = |xs: &Vec<Tensor<f64>>| combine_forward(&xs.iter().collect::<Vec<_>>(), mode).unwrap();
    let r = randn(f(&xs).shape(), rng);
    let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
    let grads = combine_backward(&r.cast::<T>(), &shapes, mode).unwrap();
    let obj = |xs: &Vec<Tensor<f64>>| dot(&f(xs), &r);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..arity)
        .map(|i| (wide(&grads[i]), numeric(&xs, |xs| xs[i].data_mut(), obj)))
        .collect();
    worst(&pairs)
}

fn check_cross_entropy<T: Element>(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (rng.gen_range(1..5), rng.gen_range(2..7));
    let logits = uniform(&[n, k], -3.0, 3.0, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let (_, grad) = cross_entropy_loss(&logits.cast::<T>(), &labels).unwrap();
    let num = numeric(&logits, |l| l.data_mut(), |l| cross_entropy_loss(l, &labels).unwrap().0);
    worst(&[(wide(&grad), num)])
}

/// Worst relative error of one randomly sized case.
pub fn check<T: Element>(kind: LayerKind, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        LayerKind::ConvBlock => check_conv::<T>(rng),
        LayerKind::MaxPool => check_pool::<T>(rng),
        LayerKind::Linear => check_linear::<T>(rng),
        LayerKind::Relu => check_relu::<T>(rng),
        LayerKind::Add => check_combine::<T>(CombineMode::Add, rng),
        LayerKind::Concat => check_combine::<T>(CombineMode::Concat, rng),
        LayerKind::CrossEntropy => check_cross_entropy::<T>(rng),
    }
}

/// Worst error over `cases` draws, and how many cases reached `tol`.
pub fn sweep<T: Element>(kind: LayerKind, cases: usize, tol: f64, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let e = check::<T>(kind, &mut rng);
        worst = worst.max(e);
        if !(e < tol) {
            failures += 1;
        }
    }
    (worst, failures)
}
