use super::{Element, NdtError, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn cross_entropy_loss<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>), NdtError> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(NdtError::Input(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NdtError::Input(format!("label {bad} out of range [0, {k})")));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0f64;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label].as_f64();
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, (gv, v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v.as_f64() - log_z).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            *gv = T::from_f64_lossy((p - target) / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>, NdtError> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f32>::zeros(&[3, 10]);
        let (loss, _) = cross_entropy_loss(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_class_is_near_zero() {
        let mut logits = Tensor::<f32>::zeros(&[1, 4]);
        logits.data_mut()[0] = 100.0;
        let (loss, grad) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(loss < 1e-30);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-30));
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(cross_entropy_loss(&logits, &[4]), Err(NdtError::Input(_))));
    }
}
