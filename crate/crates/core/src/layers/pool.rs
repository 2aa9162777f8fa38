use super::{expect_rank, expect_shape, GradBundle};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn pool_output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    super::conv_output_extent(input, kernel, stride, 0)
}

fn pooled_extents<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<[usize; 5]> {
    expect_rank("maxpool input", input, 3)?;
    let [c, h, w] = input.shape().try_into().unwrap();
    match (
        pool_output_extent(h, kernel, stride),
        pool_output_extent(w, kernel, stride),
    ) {
        (Some(oh), Some(ow)) => Ok([c, h, w, oh, ow]),
        _ => Err(Error::shape(format!(
            "maxpool: kernel {kernel} (stride {stride}) larger than {h}x{w} input"
        ))),
    }
}

/// Max-pool over `[C,H,W]`, also returning the within-plane offset of each
/// window's maximum (first in row-major scan order on ties).
pub fn maxpool_with_indices<T: Real>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [c, h, w, oh, ow] = pooled_extents(input, kernel, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for plane in x.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for at in row..row + kernel {
                        if plane[at] > plane[best] {
                            best = at;
                        }
                    }
                }
                out.push(plane[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

pub fn maxpool<T: Real>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool_with_indices(input, kernel, stride).map(|(t, _)| t)
}

/// Routes each upstream value to its window's argmax.
pub fn maxpool_backward<T: Real>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let [c, h, w, oh, ow] = pooled_extents(input, kernel, stride)?;
    expect_shape("maxpool upstream", upstream, &[c, oh, ow])?;
    let (_, idx) = maxpool_with_indices(input, kernel, stride)?;
    let mut dx = vec![T::zero(); c * h * w];
    for (i, (&g, &at)) in upstream.data().iter().zip(&idx).enumerate() {
        let plane = i / (oh * ow);
        dx[plane * h * w + at] += g;
    }
    Ok(GradBundle {
        params: Vec::new(),
        input: Tensor::new(input.shape().to_vec(), dx)?,
    })
}
