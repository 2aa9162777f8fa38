use super::{expect_rank, expect_shape, GradBundle};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Across-channel local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    /// Window size in channels.
    pub size: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.k >= 1.0) {
            return Err(Error::Config(format!(
                "LRN needs size >= 1, alpha > 0, beta > 0, k >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Channel window `[lo, hi]` around `c`, clipped to `0..channels`.
    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let before = (self.size - 1) / 2;
        let after = self.size - 1 - before;
        (c.saturating_sub(before), (c + after).min(channels - 1))
    }
}

/// `k + (alpha/n) * sum of squares` over each channel window.
fn denominators<T: Real>(x: &[T], channels: usize, plane: usize, p: &LrnParams) -> Vec<T> {
    let scale = T::of(p.alpha / p.size as f64);
    let mut scale_sum = vec![T::of(p.k); channels * plane];
    for c in 0..channels {
        let (lo, hi) = p.window(c, channels);
        let dst = &mut scale_sum[c * plane..(c + 1) * plane];
        for src_c in lo..=hi {
            let src = &x[src_c * plane..(src_c + 1) * plane];
            for (d, &a) in dst.iter_mut().zip(src) {
                *d += scale * a * a;
            }
        }
    }
    scale_sum
}

/// `b_c = a_c / (k + alpha/n * sum_{c' in window(c)} a_{c'}^2)^beta` on `[C,H,W]`.
pub fn lrn<T: Real>(input: &Tensor<T>, p: &LrnParams) -> Result<Tensor<T>> {
    p.validate()?;
    expect_rank("lrn input", input, 3)?;
    let channels = input.shape()[0];
    let plane = input.len() / channels;
    let s = denominators(input.data(), channels, plane, p);
    let beta = T::of(p.beta);
    let out = input
        .data()
        .iter()
        .zip(&s)
        .map(|(&a, &d)| a * d.powf(-beta))
        .collect();
    Tensor::new(input.shape().to_vec(), out)
}

pub fn lrn_backward<T: Real>(
    input: &Tensor<T>,
    p: &LrnParams,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    p.validate()?;
    expect_rank("lrn input", input, 3)?;
    expect_shape("lrn upstream", upstream, input.shape())?;
    let channels = input.shape()[0];
    let plane = input.len() / channels;
    let x = input.data();
    let g = upstream.data();
    let s = denominators(x, channels, plane, p);
    let beta = T::of(p.beta);

    // Direct term g_c * s_c^-beta, then the cross-channel term through each s_c.
    let mut dx: Vec<T> = g.iter().zip(&s).map(|(&gc, &sc)| gc * sc.powf(-beta)).collect();
    let coef: Vec<T> = (0..x.len())
        .map(|i| g[i] * x[i] * s[i].powf(-beta - T::one()))
        .collect();
    let factor = T::of(2.0 * p.alpha * p.beta / p.size as f64);
    for c in 0..channels {
        let (lo, hi) = p.window(c, channels);
        let coef_c = &coef[c * plane..(c + 1) * plane];
        for j in lo..=hi {
            let (xj, dxj) = (&x[j * plane..(j + 1) * plane], &mut dx[j * plane..(j + 1) * plane]);
            for ((d, &a), &k) in dxj.iter_mut().zip(xj).zip(coef_c) {
                *d -= factor * a * k;
            }
        }
    }
    Ok(GradBundle {
        params: Vec::new(),
        input: Tensor::new(input.shape().to_vec(), dx)?,
    })
}
