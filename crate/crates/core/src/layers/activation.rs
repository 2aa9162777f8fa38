use super::{expect_shape, GradBundle};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient is zero wherever the input is `<= 0`, including exactly at the kink.
pub fn relu_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<GradBundle<T>> {
    expect_shape("relu upstream", upstream, input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(GradBundle {
        params: Vec::new(),
        input: Tensor::new(input.shape().to_vec(), data)?,
    })
}
