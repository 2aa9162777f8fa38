//! Encoder and classifier building blocks, each with a hand-written backward.
//!
//! Every backward returns a [`GradBundle`]: parameter gradients in the order
//! the parameters are listed on the layer (e.g. `[kernels, bias]` for conv),
//! plus the gradient with respect to the layer input.

mod activation;
mod conv;
mod linear;
mod loss;
mod lrn;
mod pool;
mod sgd;

pub use activation::{relu, relu_backward};
pub use conv::{conv2d, conv2d_backward, conv_output_extent, ConvParams};
pub use linear::{linear, linear_backward, LinearParams};
pub use loss::{softmax, softmax_cross_entropy};
pub use lrn::{lrn, lrn_backward, LrnParams};
pub use pool::{maxpool, maxpool_backward, maxpool_with_indices, pool_output_extent};
pub use sgd::{sgd_step, SgdConfig};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct GradBundle<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

fn expect_shape<T: Real>(what: &str, t: &Tensor<T>, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::shape(format!(
            "{what}: expected shape {want:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_rank<T: Real>(what: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}
