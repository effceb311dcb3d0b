use super::{Element, NdtError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Element = f32> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Element>(&self) -> LinearParams<U> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `input · W + bias` for `input: [N, F]`.
pub fn linear_forward<T: Element>(
    input: &Tensor<T>,
    params: &LinearParams<T>,
) -> Result<Tensor<T>, NdtError> {
    let (n, f) = input.dims2()?;
    let (fin, o) = (params.in_dim(), params.out_dim());
    if f != fin {
        return Err(NdtError::Dimension(format!(
            "linear expects {fin} inputs, got {f}"
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(params.bias.data());
    }
    T::gemm(
        n,
        f,
        o,
        T::one(),
        input.data(),
        f as isize,
        1,
        params.weight.data(),
        o as isize,
        1,
        T::one(),
        out.data_mut(),
        o as isize,
        1,
    );
    Ok(out)
}

pub fn linear_backward<T: Element>(
    d_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &LinearParams<T>,
) -> Result<(Tensor<T>, LinearGrads<T>), NdtError> {
    let (n, f) = input.dims2()?;
    let o = params.out_dim();
    if d_out.shape() != [n, o] {
        return Err(NdtError::Dimension(format!(
            "linear backward: gradient {:?}, expected [{n}, {o}]",
            d_out.shape()
        )));
    }
    let mut dw = Tensor::zeros(&[f, o]);
    T::gemm(
        f,
        n,
        o,
        T::one(),
        input.data(),
        1,
        f as isize,
        d_out.data(),
        o as isize,
        1,
        T::zero(),
        dw.data_mut(),
        o as isize,
        1,
    );
    let mut db = Tensor::zeros(&[o]);
    for row in d_out.data().chunks(o) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    let mut dx = Tensor::zeros(&[n, f]);
    T::gemm(
        n,
        o,
        f,
        T::one(),
        d_out.data(),
        o as isize,
        1,
        params.weight.data(),
        1,
        o as isize,
        T::zero(),
        dx.data_mut(),
        f as isize,
        1,
    );
    Ok((dx, LinearGrads { weight: dw, bias: db }))
}

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its forward output.
pub fn relu_backward<T: Element>(d_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let mut dx = d_out.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}
