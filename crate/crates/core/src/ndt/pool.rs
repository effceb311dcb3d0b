use super::{conv::conv_output_dim, Element, NdtError, Tensor};

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of the winning element for every output cell.
    argmax: Vec<usize>,
}

pub fn maxpool_forward<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, MaxPoolCache), NdtError> {
    let (n, c, h, w) = input.dims4()?;
    let degenerate =
        || NdtError::Degenerate(format!("{kernel}x{kernel} pool window on {h}x{w} input"));
    let ho = conv_output_dim(h, kernel, 0, stride).ok_or_else(degenerate)?;
    let wo = conv_output_dim(w, kernel, 0, stride).ok_or_else(degenerate)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for idx in row..row + kernel {
                        // strict comparison keeps the first maximum in row-major order
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                od[o] = x[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((
        out,
        MaxPoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Element>(
    d_out: &Tensor<T>,
    cache: &MaxPoolCache,
) -> Result<Tensor<T>, NdtError> {
    if d_out.len() != cache.argmax.len() {
        return Err(NdtError::Dimension(format!(
            "maxpool backward: {} gradient cells for {} outputs",
            d_out.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&cache.input_shape);
    let dd = dx.data_mut();
    for (&g, &idx) in d_out.data().iter().zip(&cache.argmax) {
        dd[idx] = dd[idx] + g;
    }
    Ok(dx)
}
