use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v <- momentum*v - lr*(g + weight_decay*p); p <- p + v`
pub fn sgd_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(format!(
            "sgd: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (lr, mu, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v - lr * (g + wd * *p);
        *p += *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![x])
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let (mut p, mut v) = (scalar(1.0), scalar(0.0));
        sgd_step(&mut p, &scalar(1.0), &mut v, &cfg).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let (mut p, mut v) = (scalar(3.25), scalar(0.0));
        sgd_step(&mut p, &scalar(0.0), &mut v, &cfg).unwrap();
        assert_eq!(p.data()[0], 3.25);
    }

    #[test]
    fn momentum_recurrence() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let (mut p, mut v) = (scalar(0.0), scalar(0.0));
        for _ in 0..2 {
            sgd_step(&mut p, &scalar(1.0), &mut v, &cfg).unwrap();
        }
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let (mut p, mut v) = (Tensor::<f64>::zeros(&[2]), Tensor::zeros(&[2]));
        let r = sgd_step(&mut p, &Tensor::zeros(&[3]), &mut v, &SgdConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
