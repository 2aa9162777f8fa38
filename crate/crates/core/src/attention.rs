//! 2D attention pooling over the encoder's time-frequency grid.
//!
//! Each grid cell `a_i` (a C-vector) is scored with a one-hidden-layer MLP,
//! `e_i = u . tanh(W a_i + b)`, the scores go through a softmax scaled by
//! `lambda`, and the utterance vector is `c = sum_i alpha_i a_i`.
//!
//! `lambda = 0` gives uniform weights (plain average pooling); `lambda = 1` is
//! the ordinary softmax.

use crate::error::{Error, Result};
use crate::layers::GradBundle;
use crate::tensor::{pairwise_sum, Real, Tensor};

/// Encoder output viewed as `L = rows * cols` annotation vectors.
///
/// Stored as `[rows, cols, channels]` (frequency, time, channel), flattened
/// row-major over `(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    annotations: Tensor<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(annotations: Tensor<T>) -> Result<Self> {
        if annotations.rank() != 3 {
            return Err(Error::shape(format!(
                "feature grid must be [F, T, C], got {:?}",
                annotations.shape()
            )));
        }
        Ok(Self { annotations })
    }

    /// From a channel-major encoder map `[C, F, T]`.
    pub fn from_channel_major(map: &Tensor<T>) -> Result<Self> {
        if map.rank() != 3 {
            return Err(Error::shape(format!(
                "encoder output must be [C, F, T], got {:?}",
                map.shape()
            )));
        }
        let [c, f, t] = map.shape().try_into().unwrap();
        let src = map.data();
        let cells = f * t;
        let grid = Tensor::from_fn(&[f, t, c], |i| src[(i % c) * cells + i / c]);
        Self::new(grid)
    }

    /// Inverse of [`FeatureGrid::from_channel_major`].
    pub fn to_channel_major(&self) -> Tensor<T> {
        let (c, cells) = (self.channels(), self.len());
        let src = self.annotations.data();
        Tensor::from_fn(&[c, self.rows(), self.cols()], |i| src[(i % cells) * c + i / cells])
    }

    pub fn rows(&self) -> usize {
        self.annotations.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.annotations.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.annotations.shape()[2]
    }

    /// Number of annotation vectors `L`.
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.annotations.data()[i * c..(i + 1) * c]
    }

    pub fn annotations(&self) -> &Tensor<T> {
        &self.annotations
    }

    /// Cells reordered so that new cell `i` is old cell `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::shape("permutation length differs from L"));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(self.annotations.len());
        for &p in perm {
            data.extend_from_slice(self.vector(p));
        }
        // Flatten to a single row so the permuted grid stays well-formed.
        Self::new(Tensor::new(vec![1, perm.len(), c], data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// `[D, C]`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub u: Tensor<T>,
    /// Softmax scale in `[0, 1]`.
    pub lambda: f64,
}

impl<T: Real> AttentionParams<T> {
    pub fn hidden_dim(&self) -> usize {
        self.w.shape()[0]
    }

    fn check(&self, grid: &FeatureGrid<T>) -> Result<(usize, usize)> {
        if self.w.rank() != 2 {
            return Err(Error::shape(format!("attention W must be [D, C], got {:?}", self.w.shape())));
        }
        let [d, c] = self.w.shape().try_into().unwrap();
        if c != grid.channels() {
            return Err(Error::shape(format!(
                "attention W expects {c} channels, grid has {}",
                grid.channels()
            )));
        }
        if self.b.shape() != [d] || self.u.shape() != [d] {
            return Err(Error::shape(format!(
                "attention b {:?} / u {:?} must both be [{d}]",
                self.b.shape(),
                self.u.shape()
            )));
        }
        check_lambda(self.lambda)?;
        Ok((d, c))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::arg(format!("lambda {lambda} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// `[L]`, sums to one.
    pub alpha: Tensor<T>,
    /// Raw scores `e`, `[L]`.
    pub scores: Tensor<T>,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Real> AttentionWeights<T> {
    /// Alpha laid out as the `[rows, cols]` frequency × time grid.
    pub fn grid(&self) -> Tensor<T> {
        self.alpha.clone().reshape(&[self.rows, self.cols]).expect("alpha has rows*cols cells")
    }
}

/// Hidden activations `tanh(W a_i + b)` as an `[L, D]` row-major buffer.
fn hidden<T: Real>(grid: &FeatureGrid<T>, p: &AttentionParams<T>, d: usize, c: usize) -> Vec<T> {
    let l = grid.len();
    let mut h = Vec::with_capacity(l * d);
    for _ in 0..l {
        h.extend_from_slice(p.b.data());
    }
    // [L, C] x [C, D]
    T::gemm(false, true, l, d, c, grid.annotations.data(), p.w.data(), T::one(), &mut h);
    for v in &mut h {
        *v = v.tanh();
    }
    h
}

fn scores_from_hidden<T: Real>(h: &[T], u: &[T]) -> Vec<T> {
    h.chunks_exact(u.len())
        .map(|row| row.iter().zip(u).map(|(&x, &w)| x * w).sum())
        .collect()
}

/// `e_i = u . tanh(W a_i + b)` for every cell.
pub fn attention_scores<T: Real>(grid: &FeatureGrid<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    let (d, c) = p.check(grid)?;
    let h = hidden(grid, p, d, c);
    Ok(Tensor::from_vec(scores_from_hidden(&h, p.u.data())))
}

/// `alpha_i = exp(lambda e_i) / sum_k exp(lambda e_k)`.
pub fn scaled_softmax<T: Real>(scores: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    check_lambda(lambda)?;
    let lam = T::of(lambda);
    let scaled: Vec<T> = scores.data().iter().map(|&e| lam * e).collect();
    Tensor::new(scores.shape().to_vec(), crate::layers::softmax(&scaled))
}

/// `c = sum_i alpha_i a_i`.
pub fn attend<T: Real>(grid: &FeatureGrid<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    if alpha.len() != grid.len() {
        return Err(Error::shape(format!(
            "alpha has {} weights for {} cells",
            alpha.len(),
            grid.len()
        )));
    }
    let mut ctx = vec![T::zero(); grid.channels()];
    T::gemm(
        false,
        false,
        1,
        grid.channels(),
        grid.len(),
        alpha.data(),
        grid.annotations.data(),
        T::zero(),
        &mut ctx,
    );
    Ok(Tensor::from_vec(ctx))
}

/// Scores, weights and context in one pass.
pub fn attention_forward<T: Real>(
    grid: &FeatureGrid<T>,
    p: &AttentionParams<T>,
) -> Result<(AttentionWeights<T>, Tensor<T>)> {
    let scores = attention_scores(grid, p)?;
    let alpha = scaled_softmax(&scores, p.lambda)?;
    let context = attend(grid, &alpha)?;
    Ok((
        AttentionWeights {
            alpha,
            scores,
            rows: grid.rows(),
            cols: grid.cols(),
        },
        context,
    ))
}

/// Gradients `[W, b, u]` and the annotation grid `[F, T, C]` given `dL/dc`.
pub fn attention_backward<T: Real>(
    grid: &FeatureGrid<T>,
    p: &AttentionParams<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let (d, c) = p.check(grid)?;
    if upstream.shape() != [c] {
        return Err(Error::shape(format!(
            "attention upstream must be [{c}], got {:?}",
            upstream.shape()
        )));
    }
    let l = grid.len();
    let a = grid.annotations.data();
    let g = upstream.data();
    let h = hidden(grid, p, d, c);
    let e = scores_from_hidden(&h, p.u.data());
    let lam = T::of(p.lambda);
    let alpha = crate::layers::softmax(&e.iter().map(|&x| lam * x).collect::<Vec<_>>());

    // dL/dalpha_i = g . a_i, then through the scaled softmax Jacobian.
    let s: Vec<T> = (0..l).map(|i| grid.vector(i).iter().zip(g).map(|(&x, &y)| x * y).sum()).collect();
    let mean_s = pairwise_sum(&alpha.iter().zip(&s).map(|(&w, &v)| w * v).collect::<Vec<_>>());
    let de: Vec<T> = (0..l).map(|i| lam * alpha[i] * (s[i] - mean_s)).collect();

    // e_i = u . h_i
    let mut du = vec![T::zero(); d];
    T::gemm(false, false, 1, d, l, &de, &h, T::zero(), &mut du);
    // dz_i = de_i * u * (1 - h_i^2)
    let u = p.u.data();
    let mut dz = h;
    for (row, &dei) in dz.chunks_exact_mut(d).zip(&de) {
        for (z, &uk) in row.iter_mut().zip(u) {
            *z = dei * uk * (T::one() - *z * *z);
        }
    }
    let mut dw = vec![T::zero(); d * c];
    T::gemm(true, false, d, c, l, &dz, a, T::zero(), &mut dw);
    let db: Vec<T> = (0..d)
        .map(|k| pairwise_sum(&dz.iter().skip(k).step_by(d).copied().collect::<Vec<_>>()))
        .collect();

    // da_i = alpha_i g + W^T dz_i
    let mut da = Vec::with_capacity(l * c);
    for &w in &alpha {
        da.extend(g.iter().map(|&x| w * x));
    }
    T::gemm(false, false, l, c, d, &dz, p.w.data(), T::one(), &mut da);

    Ok(GradBundle {
        params: vec![
            Tensor::new(vec![d, c], dw)?,
            Tensor::from_vec(db),
            Tensor::from_vec(du),
        ],
        input: Tensor::new(grid.annotations.shape().to_vec(), da)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, c: usize, f: impl FnMut(usize) -> f64) -> FeatureGrid<f64> {
        FeatureGrid::new(Tensor::from_fn(&[rows, cols, c], f)).unwrap()
    }

    fn params(d: usize, c: usize, lambda: f64, f: impl Fn(usize) -> f64) -> AttentionParams<f64> {
        AttentionParams {
            w: Tensor::from_fn(&[d, c], &f),
            b: Tensor::from_fn(&[d], |i| f(i + 1000)),
            u: Tensor::from_fn(&[d], |i| f(i + 2000)),
            lambda,
        }
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let g = grid(2, 3, 4, |i| i as f64);
        let p = params(5, 4, 0.3, |_| 0.0);
        assert!(attention_scores(&g, &p).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn identity_projection_scores() {
        let c = 3;
        let g = grid(1, 2, c, |_| 0.5);
        let p = AttentionParams {
            w: Tensor::from_fn(&[c, c], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }),
            b: Tensor::zeros(&[c]),
            u: Tensor::from_vec(vec![1.0, 0.0, 0.0]),
            lambda: 0.3,
        };
        let e = attention_scores(&g, &p).unwrap();
        for &v in e.data() {
            assert!((v - 0.5f64.tanh()).abs() < 1e-15);
            assert!((v - 0.462117).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_major_roundtrip() {
        let map = Tensor::<f64>::from_fn(&[4, 3, 5], |i| i as f64);
        let g = FeatureGrid::from_channel_major(&map).unwrap();
        assert_eq!(g.len(), 15);
        // cell (1, 2) -> flat index 7; channel 3 lives at map[3, 1, 2]
        assert_eq!(g.vector(7)[3], map.get(&[3, 1, 2]).unwrap());
        assert_eq!(g.to_channel_major(), map);
    }

    #[test]
    fn uniform_at_lambda_zero() {
        let e = Tensor::from_vec(vec![3.0f64, -1.0, 0.0, 9.0, 2.5, -7.0, 1.0]);
        let a = scaled_softmax(&e, 0.0).unwrap();
        assert!(a.data().iter().all(|&x| x == 1.0 / 7.0));
    }

    #[test]
    fn plain_softmax_at_lambda_one() {
        let e = Tensor::from_vec(vec![4f64.ln(), 0.0]);
        let a = scaled_softmax(&e, 1.0).unwrap();
        assert!((a.data()[0] - 0.8).abs() < 1e-15);
        assert!((a.data()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scaled_case() {
        let a = scaled_softmax(&Tensor::from_vec(vec![10.0f64, 0.0]), 0.3).unwrap();
        let e3 = 3f64.exp();
        assert!((a.data()[0] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!((a.data()[0] - 0.952574).abs() < 1e-6);
    }

    #[test]
    fn lambda_out_of_range() {
        let e = Tensor::from_vec(vec![0.0f64]);
        assert!(matches!(scaled_softmax(&e, 1.5), Err(Error::Argument(_))));
        assert!(matches!(scaled_softmax(&e, -0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn attend_cases() {
        let g = grid(1, 2, 2, |i| [4.0, 0.0, 0.0, 4.0][i]);
        let c = attend(&g, &Tensor::from_vec(vec![0.75, 0.25])).unwrap();
        assert_eq!(c.data(), &[3.0, 1.0]);

        let g = grid(2, 2, 3, |i| (i * i) as f64);
        let onehot = Tensor::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(attend(&g, &onehot).unwrap().data(), g.vector(2));

        let uniform = Tensor::full(&[4], 0.25);
        let mean: Vec<f64> = (0..3).map(|k| (0..4).map(|i| g.vector(i)[k]).sum::<f64>() / 4.0).collect();
        for (a, b) in attend(&g, &uniform).unwrap().data().iter().zip(mean) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(matches!(attend(&g, &Tensor::full(&[3], 1.0 / 3.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn lambda_zero_has_no_score_gradients() {
        let g = grid(2, 3, 5, |i| ((i * 7) as f64).sin());
        let p = params(4, 5, 0.0, |i| ((i * 3 + 1) as f64).cos() * 0.5);
        let up = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let grads = attention_backward(&g, &p, &up).unwrap();
        for t in &grads.params {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        // Pure averaging: every cell receives g / L.
        for (i, &v) in grads.input.data().iter().enumerate() {
            assert!((v - up.data()[i % 5] / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let g = grid(1, 2, 3, |_| 0.0);
        let p = params(4, 5, 0.3, |_| 0.1);
        assert!(matches!(attention_scores(&g, &p), Err(Error::Shape(_))));
    }
}
