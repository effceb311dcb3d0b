//! Convolution block: 2-D convolution (stride 1), batch normalization, ReLU.

use super::{Element, NdtError, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Closed-form output extent `floor((h + 2p - k) / s) + 1`, or `None` when the
/// window does not fit.
pub fn conv_output_dim(h: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn same_padding(kernel: usize, padded: bool) -> usize {
    if padded {
        (kernel - 1) / 2
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T: Element = f32> {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> ConvBlockParams<T> {
    /// Zero kernel and bias with identity batch-norm statistics.
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            gamma: Tensor::full(&[out_ch], T::one()),
            beta: Tensor::zeros(&[out_ch]),
            running_mean: Tensor::zeros(&[out_ch]),
            running_var: Tensor::full(&[out_ch], T::one()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn cast<U: Element>(&self) -> ConvBlockParams<U> {
        ConvBlockParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlockGrads<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Saved activations for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvBlockCache<T: Element = f32> {
    input: Tensor<T>,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    output: Tensor<T>,
    pad: usize,
    training: bool,
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = oy + ki;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < pad || iy - pad >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox + kj;
                        *v = if ix < pad || ix - pad >= w {
                            T::zero()
                        } else {
                            src[ix - pad]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = oy + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    for ox in 0..wo {
                        let ix = ox + kj;
                        if ix >= pad && ix - pad < w {
                            dst[ix - pad] = dst[ix - pad] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain stride-1 convolution with bias, output `[N, K, H', W']`.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>, NdtError> {
    let (n, c, h, w) = input.dims4()?;
    let (kout, kin, k) = match *weight.shape() {
        [o, i, kh, kw] if kh == kw => (o, i, kh),
        _ => {
            return Err(NdtError::Dimension(format!(
                "conv weight must be [out,in,k,k], got {:?}",
                weight.shape()
            )))
        }
    };
    if kin != c {
        return Err(NdtError::Dimension(format!(
            "conv expects {kin} input channels, got {c}"
        )));
    }
    if bias.shape() != [kout] {
        return Err(NdtError::Dimension(format!(
            "conv bias must be [{kout}], got {:?}",
            bias.shape()
        )));
    }
    let degenerate = || NdtError::Degenerate(format!("{k}x{k} kernel on {h}x{w} input, pad {pad}"));
    let ho = conv_output_dim(h, k, pad, 1).ok_or_else(degenerate)?;
    let wo = conv_output_dim(w, k, pad, 1).ok_or_else(degenerate)?;
    let hw = ho * wo;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, kout, ho, wo]);
    let mut cols = vec![T::zero(); ckk * hw];
    let x = input.data();
    for ni in 0..n {
        im2col(&x[ni * c * h * w..(ni + 1) * c * h * w], c, h, w, k, pad, ho, wo, &mut cols);
        let dst = &mut out.data_mut()[ni * kout * hw..(ni + 1) * kout * hw];
        for (ko, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[ko]);
        }
        T::gemm(
            kout,
            ckk,
            hw,
            T::one(),
            weight.data(),
            ckk as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            dst,
            hw as isize,
            1,
        );
    }
    Ok(out)
}

/// `ReLU(BN(Conv(input)))`. In training mode batch-norm uses batch statistics
/// and updates the running statistics in `params`; in eval mode it uses the
/// running statistics.
pub fn conv_block_forward<T: Element>(
    input: &Tensor<T>,
    params: &mut ConvBlockParams<T>,
    padded: bool,
    training: bool,
) -> Result<(Tensor<T>, ConvBlockCache<T>), NdtError> {
    let pad = same_padding(params.kernel(), padded);
    let z = conv2d_forward(input, &params.weight, &params.bias, pad)?;
    let (n, kout, ho, wo) = z.dims4()?;
    let hw = ho * wo;
    let m = n * hw;

    let mut inv_std = vec![T::zero(); kout];
    let mut mean = vec![T::zero(); kout];
    if training {
        for ko in 0..kout {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for ni in 0..n {
                for &v in &z.data()[(ni * kout + ko) * hw..(ni * kout + ko + 1) * hw] {
                    let v = v.as_f64();
                    s += v;
                    s2 += v * v;
                }
            }
            let mu = s / m as f64;
            let var = (s2 / m as f64 - mu * mu).max(0.0);
            mean[ko] = T::from_f64_lossy(mu);
            inv_std[ko] = T::from_f64_lossy(1.0 / (var + BN_EPS).sqrt());
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            let rm = &mut params.running_mean.data_mut()[ko];
            *rm = T::from_f64_lossy((1.0 - BN_MOMENTUM) * rm.as_f64() + BN_MOMENTUM * mu);
            let rv = &mut params.running_var.data_mut()[ko];
            *rv = T::from_f64_lossy((1.0 - BN_MOMENTUM) * rv.as_f64() + BN_MOMENTUM * unbiased);
        }
    } else {
        for ko in 0..kout {
            mean[ko] = params.running_mean.data()[ko];
            inv_std[ko] =
                T::from_f64_lossy(1.0 / (params.running_var.data()[ko].as_f64() + BN_EPS).sqrt());
        }
    }

    let mut xhat = z;
    let mut output = Tensor::zeros(xhat.shape());
    {
        let xd = xhat.data_mut();
        let od = output.data_mut();
        for ni in 0..n {
            for ko in 0..kout {
                let g = params.gamma.data()[ko];
                let b = params.beta.data()[ko];
                let range = (ni * kout + ko) * hw..(ni * kout + ko + 1) * hw;
                for (xv, ov) in xd[range.clone()].iter_mut().zip(&mut od[range]) {
                    *xv = (*xv - mean[ko]) * inv_std[ko];
                    let y = g * *xv + b;
                    *ov = if y > T::zero() { y } else { T::zero() };
                }
            }
        }
    }
    let cache = ConvBlockCache {
        input: input.clone(),
        xhat,
        inv_std,
        output: output.clone(),
        pad,
        training,
    };
    Ok((output, cache))
}

/// Gradients of the block given `d_out = dLoss/dOutput`. Returns
/// `(dLoss/dInput, parameter gradients)`.
pub fn conv_block_backward<T: Element>(
    d_out: &Tensor<T>,
    params: &ConvBlockParams<T>,
    cache: &ConvBlockCache<T>,
) -> Result<(Tensor<T>, ConvBlockGrads<T>), NdtError> {
    if d_out.shape() != cache.output.shape() {
        return Err(NdtError::Dimension(format!(
            "conv backward: gradient {:?} vs output {:?}",
            d_out.shape(),
            cache.output.shape()
        )));
    }
    let (n, kout, ho, wo) = d_out.dims4()?;
    let (_, c, h, w) = cache.input.dims4()?;
    let k = params.kernel();
    let hw = ho * wo;
    let m = (n * hw) as f64;

    // through ReLU and the BN affine
    let mut d_bn = d_out.clone();
    for (d, &o) in d_bn.data_mut().iter_mut().zip(cache.output.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    let mut d_gamma = Tensor::zeros(&[kout]);
    let mut d_beta = Tensor::zeros(&[kout]);
    let mut sum_dxhat = vec![0.0f64; kout];
    let mut sum_dxhat_xhat = vec![0.0f64; kout];
    for ko in 0..kout {
        let g = params.gamma.data()[ko].as_f64();
        let (mut dg, mut db) = (0.0f64, 0.0f64);
        for ni in 0..n {
            let range = (ni * kout + ko) * hw..(ni * kout + ko + 1) * hw;
            for (&d, &xh) in d_bn.data()[range.clone()].iter().zip(&cache.xhat.data()[range]) {
                let (d, xh) = (d.as_f64(), xh.as_f64());
                dg += d * xh;
                db += d;
            }
        }
        d_gamma.data_mut()[ko] = T::from_f64_lossy(dg);
        d_beta.data_mut()[ko] = T::from_f64_lossy(db);
        sum_dxhat[ko] = db * g;
        sum_dxhat_xhat[ko] = dg * g;
    }

    let mut dz = d_bn;
    for ni in 0..n {
        for ko in 0..kout {
            let g = params.gamma.data()[ko];
            let is = cache.inv_std[ko];
            let range = (ni * kout + ko) * hw..(ni * kout + ko + 1) * hw;
            let xh = &cache.xhat.data()[range.clone()];
            for (d, &x) in dz.data_mut()[range].iter_mut().zip(xh) {
                let dxhat = *d * g;
                *d = if cache.training {
                    let v = (m * dxhat.as_f64()
                        - sum_dxhat[ko]
                        - x.as_f64() * sum_dxhat_xhat[ko])
                        * is.as_f64()
                        / m;
                    T::from_f64_lossy(v)
                } else {
                    dxhat * is
                };
            }
        }
    }

    // convolution
    let ckk = c * k * k;
    let mut d_weight: Tensor<T> = Tensor::zeros(params.weight.shape());
    let mut d_bias: Tensor<T> = Tensor::zeros(&[kout]);
    let mut d_input: Tensor<T> = Tensor::zeros(cache.input.shape());
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = vec![T::zero(); ckk * hw];
    let x = cache.input.data();
    for ni in 0..n {
        let dzn = &dz.data()[ni * kout * hw..(ni + 1) * kout * hw];
        for (ko, row) in dzn.chunks(hw).enumerate() {
            let s = row.iter().fold(0.0f64, |a, v| a + v.as_f64());
            let db = &mut d_bias.data_mut()[ko];
            *db = T::from_f64_lossy(db.as_f64() + s);
        }
        im2col(&x[ni * c * h * w..(ni + 1) * c * h * w], c, h, w, k, cache.pad, ho, wo, &mut cols);
        // dW += dz_n [K, HW] · cols^T [HW, CKK]
        T::gemm(
            kout,
            hw,
            ckk,
            T::one(),
            dzn,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            T::one(),
            d_weight.data_mut(),
            ckk as isize,
            1,
        );
        // dcols = W^T [CKK, K] · dz_n [K, HW]
        T::gemm(
            ckk,
            kout,
            hw,
            T::one(),
            params.weight.data(),
            1,
            ckk as isize,
            dzn,
            hw as isize,
            1,
            T::zero(),
            &mut dcols,
            hw as isize,
            1,
        );
        col2im(
            &dcols,
            c,
            h,
            w,
            k,
            cache.pad,
            ho,
            wo,
            &mut d_input.data_mut()[ni * c * h * w..(ni + 1) * c * h * w],
        );
    }
    Ok((
        d_input,
        ConvBlockGrads {
            weight: d_weight,
            bias: d_bias,
            gamma: d_gamma,
            beta: d_beta,
        },
    ))
}
