//! Glorot-uniform initialization.

use rand::Rng;

use crate::ndt::{ConvBlockParams, LinearParams, Tensor};

/// Uniform draw from `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_value<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> f32 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.gen_range(-limit..=limit) as f32
}

pub fn conv_fans(in_ch: usize, out_ch: usize, kernel: usize) -> (usize, usize) {
    (in_ch * kernel * kernel, out_ch * kernel * kernel)
}

/// Glorot kernel, zero bias, identity batch-norm.
pub fn glorot_conv<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> ConvBlockParams {
    let (fi, fo) = conv_fans(in_ch, out_ch, kernel);
    let mut p = ConvBlockParams::zeros(in_ch, out_ch, kernel);
    p.weight = Tensor::from_fn(p.weight.shape(), |_| glorot_value(fi, fo, rng));
    p
}

pub fn glorot_linear<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> LinearParams {
    LinearParams {
        weight: Tensor::from_fn(&[in_dim, out_dim], |_| glorot_value(in_dim, out_dim, rng)),
        bias: Tensor::zeros(&[out_dim]),
    }
}
