use super::{expect_rank, expect_shape, GradBundle};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `[out_dim, in_dim]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearParams<T> {
    fn dims(&self, input: &Tensor<T>) -> Result<(usize, usize)> {
        expect_rank("linear weight", &self.weight, 2)?;
        let [out_dim, in_dim] = self.weight.shape().try_into().unwrap();
        expect_shape("linear bias", &self.bias, &[out_dim])?;
        if input.len() != in_dim || input.rank() != 1 {
            return Err(Error::shape(format!(
                "linear: input {:?} does not match in_dim {in_dim}",
                input.shape()
            )));
        }
        Ok((out_dim, in_dim))
    }
}

pub fn linear<T: Real>(input: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let (out_dim, _) = p.dims(input)?;
    let mut out = p.bias.data().to_vec();
    T::gemm(false, false, out_dim, 1, input.len(), p.weight.data(), input.data(), T::one(), &mut out);
    Tensor::new(vec![out_dim], out)
}

/// Gradients `[weight, bias]` and input.
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    p: &LinearParams<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let (out_dim, in_dim) = p.dims(input)?;
    expect_shape("linear upstream", upstream, &[out_dim])?;
    let g = upstream.data();
    let x = input.data();
    let dw = Tensor::from_fn(&[out_dim, in_dim], |i| g[i / in_dim] * x[i % in_dim]);
    let mut dx = vec![T::zero(); in_dim];
    T::gemm(true, false, in_dim, 1, out_dim, p.weight.data(), g, T::zero(), &mut dx);
    Ok(GradBundle {
        params: vec![dw, upstream.clone()],
        input: Tensor::new(vec![in_dim], dx)?,
    })
}
