//! Central finite-difference checks of every analytic backward pass, run in
//! double precision.
//!
//! Each check evaluates a function whose outputs are contracted against a
//! fixed random upstream vector, so a single scalar is differentiated. The
//! function also returns a fingerprint of its piecewise-linear branch (ReLU
//! masks, pool argmaxes). A probe whose fingerprint differs from the base
//! point straddles a kink; epsilon is shrunk tenfold, at most twice, and the
//! coordinate is skipped if it still straddles.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, AttentionParams, FeatureGrid};
use crate::error::Result;
use crate::layers::{
    conv2d, conv2d_backward, linear, linear_backward, lrn, lrn_backward, maxpool_backward, maxpool_with_indices,
    relu, relu_backward, softmax_cross_entropy, ConvParams, LinearParams, LrnParams,
};
use crate::model::{build_model, Model, ModelConfig, Stack};
use crate::tensor::{pairwise_sum, Tensor};

/// Pass threshold for the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Step for whole-model checks. A few parameters there have gradients
    /// below 1e-8, where a 1e-5 step leaves only roundoff in the difference.
    pub model_epsilon: f64,
    /// Tensors larger than this are checked on a random subset of this size.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            model_epsilon: 1e-3,
            max_coords: 200,
            seed: 7,
        }
    }
}

/// `|a - n| / max(|a| + |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates abandoned because every probe straddled a kink.
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} max_rel_err={:.3e} checked={} skipped={}",
            self.name, self.max_rel_error, self.checked, self.skipped
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " worst={}[{}] analytic={:.6e} numeric={:.6e}",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Something whose tensors can be nudged and re-evaluated.
pub trait Probe {
    fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f64>;
    /// Outputs and branch fingerprint at the current tensor values.
    fn eval(&self) -> Result<(Vec<f64>, u64)>;
}

/// A plain function of a list of tensors.
pub struct FnProbe<F> {
    pub tensors: Vec<Tensor<f64>>,
    pub f: F,
}

impl<F> Probe for FnProbe<F>
where
    F: Fn(&[Tensor<f64>]) -> Result<(Vec<f64>, u64)>,
{
    fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f64> {
        &mut self.tensors[index]
    }

    fn eval(&self) -> Result<(Vec<f64>, u64)> {
        (self.f)(&self.tensors)
    }
}

/// Loss of a whole model on one utterance, probed through its parameters.
pub struct ModelProbe {
    pub model: Model<f64>,
    pub spec: Tensor<f64>,
    pub label: usize,
}

impl Probe for ModelProbe {
    fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f64> {
        self.model.params_mut().swap_remove(index)
    }

    fn eval(&self) -> Result<(Vec<f64>, u64)> {
        let (loss, fp) = self.model.loss_with_fingerprint(&self.spec, self.label)?;
        Ok((vec![loss], fp))
    }
}

/// Compares `analytic[t]` (the gradient of `weights . outputs` with respect
/// to probe tensor `t`) against central differences.
pub fn check_probe<P: Probe>(
    name: &str,
    probe: &mut P,
    tensor_names: &[String],
    analytic: &[Tensor<f64>],
    weights: &[f64],
    cfg: &GradCheckConfig,
) -> Result<CheckReport> {
    let (_, base_fp) = probe.eval()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.max_coords).into_vec();
            v.sort_unstable();
            v
        };
        for j in coords {
            let Some(numeric) = numeric_derivative(probe, t, j, weights, base_fp, cfg.epsilon)? else {
                report.skipped += 1;
                continue;
            };
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Coordinate {
                    tensor: tensor_names[t].clone(),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn numeric_derivative<P: Probe>(
    probe: &mut P,
    t: usize,
    j: usize,
    weights: &[f64],
    base_fp: u64,
    epsilon: f64,
) -> Result<Option<f64>> {
    let orig = probe.tensor_mut(t).data()[j];
    let mut eps = epsilon;
    for _ in 0..3 {
        let (hi, lo) = (orig + eps, orig - eps);
        probe.tensor_mut(t).data_mut()[j] = hi;
        let plus = probe.eval();
        probe.tensor_mut(t).data_mut()[j] = lo;
        let minus = probe.eval();
        probe.tensor_mut(t).data_mut()[j] = orig;
        let ((op, fp_plus), (om, fp_minus)) = (plus?, minus?);
        if fp_plus == base_fp && fp_minus == base_fp {
            let terms: Vec<f64> = weights
                .iter()
                .zip(op.iter().zip(&om))
                .map(|(w, (p, m))| w * (p - m))
                .collect();
            return Ok(Some(pairwise_sum(&terms) / (hi - lo)));
        }
        eps /= 10.0;
    }
    Ok(None)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn fingerprint<H: Hash>(x: H) -> u64 {
    let mut h = DefaultHasher::new();
    x.hash(&mut h);
    h.finish()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Checks a layer given as `forward(tensors) -> output` and
/// `backward(tensors, upstream) -> gradients` (same order as `tensors`).
fn check_layer(
    name: &str,
    tensors: Vec<Tensor<f64>>,
    tensor_names: &[&str],
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    forward: impl Fn(&[Tensor<f64>]) -> Result<(Tensor<f64>, u64)>,
    backward: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
    corrupt: bool,
) -> Result<CheckReport> {
    let (out, _) = forward(&tensors)?;
    let upstream = uniform(rng, out.shape(), -1.0, 1.0);
    let mut analytic = backward(&tensors, &upstream)?;
    if corrupt {
        analytic[0].scale(1.1);
    }
    let mut probe = FnProbe {
        tensors,
        f: |ts: &[Tensor<f64>]| forward(ts).map(|(o, fp)| (o.into_data(), fp)),
    };
    check_probe(name, &mut probe, &names(tensor_names), &analytic, upstream.data(), cfg)
}

/// 4 kernels over an 8x5x5 input, 3x3 with padding 1.
pub fn check_conv2d(cfg: &GradCheckConfig) -> Result<CheckReport> {
    conv_case("conv2d", [8, 5, 5], [4, 8, 3, 3], 1, 1, cfg)
}

pub fn check_conv2d_strided(cfg: &GradCheckConfig) -> Result<CheckReport> {
    conv_case("conv2d_strided", [3, 9, 8], [5, 3, 3, 3], 2, 0, cfg)
}

fn conv_case(
    name: &str,
    input: [usize; 3],
    kernels: [usize; 4],
    stride: usize,
    pad: usize,
    cfg: &GradCheckConfig,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0);
    let tensors = vec![
        uniform(&mut rng, &input, -1.0, 1.0),
        uniform(&mut rng, &kernels, -0.5, 0.5),
        uniform(&mut rng, &[kernels[0]], -0.5, 0.5),
    ];
    let params = move |ts: &[Tensor<f64>]| ConvParams {
        kernels: ts[1].clone(),
        bias: ts[2].clone(),
        stride,
        pad,
    };
    check_layer(
        name,
        tensors,
        &["input", "kernels", "bias"],
        cfg,
        &mut rng,
        |ts| Ok((conv2d(&ts[0], &params(ts))?, 0)),
        |ts, up| {
            let g = conv2d_backward(&ts[0], &params(ts), up)?;
            Ok([vec![g.input], g.params].concat())
        },
        false,
    )
}

/// Inputs are kept at least 0.1 away from the kink.
pub fn check_relu(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4e);
    let x = Tensor::from_fn(&[3, 4, 5], |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    check_layer(
        "relu",
        vec![x],
        &["input"],
        cfg,
        &mut rng,
        |ts| Ok((relu(&ts[0]), 0)),
        |ts, up| Ok(vec![relu_backward(&ts[0], up)?.input]),
        false,
    )
}

pub fn check_maxpool(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a);
    let x = uniform(&mut rng, &[3, 7, 8], -1.0, 1.0);
    check_layer(
        "maxpool",
        vec![x],
        &["input"],
        cfg,
        &mut rng,
        |ts| {
            let (out, idx) = maxpool_with_indices(&ts[0], 3, 2)?;
            Ok((out, fingerprint(idx)))
        },
        |ts, up| Ok(vec![maxpool_backward(&ts[0], 3, 2, up)?.input]),
        false,
    )
}

/// Default constants, plus a strongly nonlinear setting so the cross-channel
/// term is not drowned out by the near-linear default.
pub fn check_lrn(cfg: &GradCheckConfig, p: LrnParams, name: &str) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1e);
    let x = uniform(&mut rng, &[7, 3, 4], 0.0, 2.0);
    check_layer(
        name,
        vec![x],
        &["input"],
        cfg,
        &mut rng,
        |ts| Ok((lrn(&ts[0], &p)?, 0)),
        |ts, up| Ok(vec![lrn_backward(&ts[0], &p, up)?.input]),
        false,
    )
}

pub fn check_linear(cfg: &GradCheckConfig, corrupt: bool) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11);
    let tensors = vec![
        uniform(&mut rng, &[4, 6], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
        uniform(&mut rng, &[6], -1.0, 1.0),
    ];
    let params = |ts: &[Tensor<f64>]| LinearParams {
        weight: ts[0].clone(),
        bias: ts[1].clone(),
    };
    check_layer(
        "linear",
        tensors,
        &["weight", "bias", "input"],
        cfg,
        &mut rng,
        |ts| Ok((linear(&ts[2], &params(ts))?, 0)),
        |ts, up| {
            let g = linear_backward(&ts[2], &params(ts), up)?;
            Ok([g.params, vec![g.input]].concat())
        },
        corrupt,
    )
}

pub fn check_softmax_ce(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c);
    let logits = uniform(&mut rng, &[5], -3.0, 3.0);
    let (_, grad) = softmax_cross_entropy(&logits, 2)?;
    let mut probe = FnProbe {
        tensors: vec![logits],
        f: |ts: &[Tensor<f64>]| Ok((vec![softmax_cross_entropy(&ts[0], 2)?.0], 0)),
    };
    check_probe("softmax_ce", &mut probe, &names(&["logits"]), &[grad], &[1.0], cfg)
}

/// L = 6 cells (2x3 grid), C = 5, D = 4.
pub fn check_attention(cfg: &GradCheckConfig, lambda: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa7);
    let tensors = vec![
        uniform(&mut rng, &[4, 5], -1.0, 1.0),
        uniform(&mut rng, &[4], -0.5, 0.5),
        uniform(&mut rng, &[4], -1.0, 1.0),
        uniform(&mut rng, &[2, 3, 5], -2.0, 2.0),
    ];
    let params = move |ts: &[Tensor<f64>]| AttentionParams {
        w: ts[0].clone(),
        b: ts[1].clone(),
        u: ts[2].clone(),
        lambda,
    };
    check_layer(
        "attention",
        tensors,
        &["w", "b", "u", "annotations"],
        cfg,
        &mut rng,
        |ts| {
            let grid = FeatureGrid::new(ts[3].clone())?;
            Ok((attention_forward(&grid, &params(ts))?.1, 0))
        },
        |ts, up| {
            let grid = FeatureGrid::new(ts[3].clone())?;
            let g = attention_backward(&grid, &params(ts), up)?;
            Ok([g.params, vec![g.input]].concat())
        },
        false,
    )
}

/// Loss of a freshly built model with respect to every parameter tensor.
pub fn check_model(name: &str, model_cfg: &ModelConfig, frames: usize, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let model = build_model::<f64>(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe2e);
    let spec = uniform(&mut rng, &[model_cfg.input_bins, frames], 0.0, 1.0);
    let label = 1 % model_cfg.num_classes;
    let (_, _, grads) = model.loss_and_grads(&spec, label)?;
    let tensor_names = model.param_names();
    let mut probe = ModelProbe { model, spec, label };
    let step = GradCheckConfig {
        epsilon: cfg.model_epsilon,
        ..*cfg
    };
    check_probe(name, &mut probe, &tensor_names, &grads, &[1.0], &step)
}

/// Standard AlexNet layout at 1/8 width on a full-height 97-frame input.
pub fn end_to_end_default() -> ModelConfig {
    ModelConfig {
        channel_scale: 0.125,
        ..ModelConfig::default()
    }
}

/// The fine-stride layout at 1/8 width on a 40-bin input.
pub fn end_to_end_small() -> ModelConfig {
    ModelConfig {
        stack: Stack::alexnet_fine(),
        input_bins: 40,
        channel_scale: 0.125,
        ..ModelConfig::default()
    }
}

/// Every layer, the attention block and two end-to-end models. `corrupt`
/// perturbs the linear layer's analytic weight gradient, to prove that the
/// harness can fail.
pub fn run_suite(cfg: &GradCheckConfig, corrupt: bool) -> Result<Vec<CheckReport>> {
    let strong = LrnParams {
        alpha: 0.5,
        k: 1.0,
        ..LrnParams::default()
    };
    Ok(vec![
        check_conv2d(cfg)?,
        check_conv2d_strided(cfg)?,
        check_maxpool(cfg)?,
        check_lrn(cfg, LrnParams::default(), "lrn")?,
        check_lrn(cfg, strong, "lrn_strong")?,
        check_relu(cfg)?,
        check_linear(cfg, corrupt)?,
        check_softmax_ce(cfg)?,
        check_attention(cfg, 0.3)?,
        check_model("end_to_end", &end_to_end_default(), 97, cfg)?,
        check_model("end_to_end_small", &end_to_end_small(), 50, cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn linear_below_1e6() {
        let r = check_linear(&GradCheckConfig::default(), false).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r}");
        assert_eq!(r.checked, 24 + 4 + 6);
    }

    #[test]
    fn conv_below_1e5() {
        let r = check_conv2d(&GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r}");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn relu_away_from_kink_below_1e6() {
        let r = check_relu(&GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r}");
    }

    #[test]
    fn attention_below_1e5() {
        let r = check_attention(&GradCheckConfig::default(), 0.3).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r}");
        assert_eq!(r.checked, 20 + 4 + 4 + 30);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let r = check_linear(&GradCheckConfig::default(), true).unwrap();
        assert!(!r.passed(SUITE_TOLERANCE), "{r}");
    }

    #[test]
    fn large_tensors_are_sampled() {
        let cfg = GradCheckConfig {
            max_coords: 10,
            ..GradCheckConfig::default()
        };
        let r = check_conv2d(&cfg).unwrap();
        assert_eq!(r.checked + r.skipped, 10 + 10 + 4);
    }

    #[test]
    fn kink_straddle_is_skipped() {
        // |x| has its kink at 0; probing exactly there always straddles.
        let mut probe = FnProbe {
            tensors: vec![Tensor::from_vec(vec![0.0, 2.0])],
            f: |ts: &[Tensor<f64>]| {
                let v = ts[0].data();
                Ok((vec![v[0].abs() + v[1]], fingerprint(v[0] > 0.0)))
            },
        };
        let analytic = [Tensor::from_vec(vec![0.0, 1.0])];
        let r = check_probe("abs", &mut probe, &names(&["x"]), &analytic, &[1.0], &GradCheckConfig::default()).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 1);
    }
}
