use super::{Element, NdtError, Tensor};

/// A learnable tensor with its gradient and per-node learning-rate scaling.
#[derive(Clone, Debug)]
pub struct Parameter<T: Element = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    lr_multiplier: f32,
    frozen: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            lr_multiplier: 1.0,
            frozen: false,
        }
    }

    pub fn lr_multiplier(&self) -> f32 {
        self.lr_multiplier
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Sets the multiplier, clamped to `[0, 1]`. Zero freezes the parameter.
    pub fn set_lr_multiplier(&mut self, m: f32) {
        self.lr_multiplier = m.clamp(0.0, 1.0);
        self.frozen = self.lr_multiplier == 0.0;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

fn check_lr(base_lr: f64) -> Result<(), NdtError> {
    if base_lr.is_nan() || base_lr < 0.0 {
        return Err(NdtError::Input(format!("learning rate must be >= 0, got {base_lr}")));
    }
    Ok(())
}

/// Plain SGD: `value -= base_lr * lr_multiplier * grad`, then zero the grads.
/// Frozen parameters are skipped entirely.
pub fn sgd_step<T: Element>(params: &mut [&mut Parameter<T>], base_lr: f64) -> Result<(), NdtError> {
    check_lr(base_lr)?;
    for p in params.iter_mut() {
        if !p.frozen {
            let step = T::from_f64_lossy(base_lr * p.lr_multiplier as f64);
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v = *v - step * g;
            }
        }
        p.zero_grad();
    }
    Ok(())
}

/// SGD with classical momentum: `v = mu*v + g; value -= lr * multiplier * v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T: Element = f32> {
    momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `params` must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], base_lr: f64) -> Result<(), NdtError> {
        check_lr(base_lr)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(NdtError::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let mu = T::from_f64_lossy(self.momentum);
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            if vel.shape() != p.value.shape() {
                return Err(NdtError::Usage("parameter shape changed under optimizer".into()));
            }
            if !p.frozen {
                let step = T::from_f64_lossy(base_lr * p.lr_multiplier as f64);
                for ((x, v), &g) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(vel.data_mut())
                    .zip(p.grad.data())
                {
                    *v = mu * *v + g;
                    *x = *x - step * *v;
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}
