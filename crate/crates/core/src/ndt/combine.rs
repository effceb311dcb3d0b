use serde::{Deserialize, Serialize};

use super::{Element, NdtError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Elementwise sum; all inputs share one shape.
    Add,
    /// Channel concatenation in parent-list order; inputs share N, H, W.
    Concat,
}

pub fn combine_forward<T: Element>(
    inputs: &[&Tensor<T>],
    mode: CombineMode,
) -> Result<Tensor<T>, NdtError> {
    let first = inputs
        .first()
        .ok_or_else(|| NdtError::MergeIncompatible("no inputs".into()))?;
    match mode {
        CombineMode::Add => {
            let mut out = (*first).clone();
            for t in &inputs[1..] {
                if t.shape() != first.shape() {
                    return Err(NdtError::MergeIncompatible(format!(
                        "add of {:?} and {:?}",
                        first.shape(),
                        t.shape()
                    )));
                }
                out.add_assign(t)?;
            }
            Ok(out)
        }
        CombineMode::Concat => {
            let (n, _, h, w) = first.dims4()?;
            let mut total = 0;
            for t in inputs {
                let (tn, tc, th, tw) = t.dims4()?;
                if (tn, th, tw) != (n, h, w) {
                    return Err(NdtError::MergeIncompatible(format!(
                        "concat of {:?} and {:?}",
                        first.shape(),
                        t.shape()
                    )));
                }
                total += tc;
            }
            let hw = h * w;
            let mut data = Vec::with_capacity(n * total * hw);
            for ni in 0..n {
                for t in inputs {
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[ni * c * hw..(ni + 1) * c * hw]);
                }
            }
            Tensor::from_vec(&[n, total, h, w], data)
        }
    }
}

/// Splits the output gradient back into one gradient per input.
pub fn combine_backward<T: Element>(
    d_out: &Tensor<T>,
    input_shapes: &[Vec<usize>],
    mode: CombineMode,
) -> Result<Vec<Tensor<T>>, NdtError> {
    match mode {
        CombineMode::Add => Ok(input_shapes.iter().map(|_| d_out.clone()).collect()),
        CombineMode::Concat => {
            let (n, total, h, w) = d_out.dims4()?;
            let hw = h * w;
            let channels: Vec<usize> = input_shapes.iter().map(|s| s[1]).collect();
            if channels.iter().sum::<usize>() != total {
                return Err(NdtError::Dimension(format!(
                    "concat backward: channels {channels:?} do not sum to {total}"
                )));
            }
            let mut grads: Vec<Vec<T>> = channels
                .iter()
                .map(|c| Vec::with_capacity(n * c * hw))
                .collect();
            let src = d_out.data();
            for ni in 0..n {
                let mut off = ni * total * hw;
                for (g, &c) in grads.iter_mut().zip(&channels) {
                    g.extend_from_slice(&src[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(input_shapes)
                .map(|(g, s)| Tensor::from_vec(s, g))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_identity_and_concat_channels() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 3, 3], |i| i as f32);
        let z = Tensor::zeros(&[1, 2, 3, 3]);
        assert_eq!(combine_forward(&[&x, &z], CombineMode::Add).unwrap(), x);

        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let c = combine_forward(&[&a, &b], CombineMode::Concat).unwrap();
        assert_eq!(c.shape(), &[1, 5, 4, 4]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 8, 28, 28]);
        let b = Tensor::<f32>::zeros(&[1, 8, 24, 24]);
        assert!(matches!(
            combine_forward(&[&a, &b], CombineMode::Add),
            Err(NdtError::MergeIncompatible(_))
        ));
        assert!(matches!(
            combine_forward(&[&a, &b], CombineMode::Concat),
            Err(NdtError::MergeIncompatible(_))
        ));
    }

    #[test]
    fn concat_preserves_parent_order() {
        let a = Tensor::<f32>::full(&[2, 1, 1, 1], 1.0);
        let b = Tensor::<f32>::full(&[2, 2, 1, 1], 2.0);
        let c = combine_forward(&[&a, &b], CombineMode::Concat).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
        let back = combine_backward(&c, &[a.shape().to_vec(), b.shape().to_vec()], CombineMode::Concat)
            .unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }
}
