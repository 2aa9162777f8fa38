use super::{expect_rank, expect_shape, GradBundle};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output extent of a strided window along one axis, `None` if the window
/// does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[out_channels, in_channels, kh, kw]`
    pub kernels: Tensor<T>,
    /// `[out_channels]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

impl<T: Real> ConvParams<T> {
    fn geometry(&self, input: &Tensor<T>) -> Result<Geometry> {
        expect_rank("conv2d input", input, 3)?;
        expect_rank("conv2d kernels", &self.kernels, 4)?;
        let [c_out, c_in_k, kh, kw] = self.kernels.shape().try_into().unwrap();
        let [c_in, h, w] = input.shape().try_into().unwrap();
        expect_shape("conv2d bias", &self.bias, &[c_out])?;
        if c_in != c_in_k {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, kernels expect {c_in_k}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            conv_output_extent(h, kh, self.stride, self.pad),
            conv_output_extent(w, kw, self.stride, self.pad),
        ) else {
            return Err(Error::shape(format!(
                "conv2d: {kh}x{kw} kernel (stride {}, pad {}) larger than padded {h}x{w} input",
                self.stride, self.pad
            )));
        };
        Ok(Geometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride: self.stride,
            pad: self.pad,
        })
    }
}

/// Unfolds input patches into a `[c_in*kh*kw, oh*ow]` matrix.
fn im2col<T: Real>(g: &Geometry, x: &[T]) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto the input grid.
fn col2im<T: Real>(g: &Geometry, cols: &[T]) -> Vec<T> {
    let p = g.positions();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation (kernels are not flipped): `[C_in,H,W] -> [C_out,H',W']`.
pub fn conv2d<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = p.geometry(input)?;
    let cols = im2col(&g, input.data());
    let positions = g.positions();
    let mut out = Vec::with_capacity(g.c_out * positions);
    for &b in p.bias.data() {
        out.extend(std::iter::repeat_n(b, positions));
    }
    T::gemm(
        false,
        false,
        g.c_out,
        positions,
        g.patch_len(),
        p.kernels.data(),
        &cols,
        T::one(),
        &mut out,
    );
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradients `[kernels, bias]` and input.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let g = p.geometry(input)?;
    expect_shape("conv2d upstream", upstream, &[g.c_out, g.oh, g.ow])?;
    let positions = g.positions();
    let k = g.patch_len();
    let dy = upstream.data();
    let cols = im2col(&g, input.data());

    let mut dk = vec![T::zero(); g.c_out * k];
    T::gemm(false, true, g.c_out, k, positions, dy, &cols, T::zero(), &mut dk);

    let db = dy
        .chunks_exact(positions)
        .map(crate::tensor::pairwise_sum)
        .collect();

    let mut dcols = cols;
    T::gemm(true, false, k, positions, g.c_out, p.kernels.data(), dy, T::zero(), &mut dcols);
    let dx = col2im(&g, &dcols);

    Ok(GradBundle {
        params: vec![
            Tensor::new(p.kernels.shape().to_vec(), dk)?,
            Tensor::new(vec![g.c_out], db)?,
        ],
        input: Tensor::new(input.shape().to_vec(), dx)?,
    })
}
