//! AlexNet-shaped fully convolutional encoder, attention pooling and a linear
//! softmax classifier.
//!
//! The encoder keeps only AlexNet's convolution/pool stack, so any spectrogram
//! long enough to survive the downsampling is accepted without cropping or
//! padding; the attention layer collapses whatever grid comes out into one
//! utterance vector.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, AttentionParams, AttentionWeights, FeatureGrid};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d, conv2d_backward, conv_output_extent, linear, linear_backward, lrn, lrn_backward, 
    maxpool_with_indices, relu, relu_backward, softmax_cross_entropy, ConvParams, LinearParams,
    LrnParams,
};
use crate::tensor::{Real, Tensor};

/// One stage of the encoder stack. Every conv is followed by ReLU, then LRN
/// when `lrn` is set.
#[derive(Debug, Clone, PartialEq)]
pub enum StageSpec {
    Conv {
        name: String,
        kernel: usize,
        stride: usize,
        pad: usize,
        channels: usize,
        lrn: bool,
    },
    Pool {
        name: String,
        kernel: usize,
        stride: usize,
    },
}

impl StageSpec {
    pub fn name(&self) -> &str {
        match self {
            StageSpec::Conv { name, .. } | StageSpec::Pool { name, .. } => name,
        }
    }

    fn geometry(&self) -> (usize, usize, usize) {
        match *self {
            StageSpec::Conv {
                kernel, stride, pad, ..
            } => (kernel, stride, pad),
            StageSpec::Pool { kernel, stride, .. } => (kernel, stride, 0),
        }
    }
}

/// Encoder stack written as `conv(k,s,p,c[,lrn]) pool(k,s) ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack(pub Vec<StageSpec>);

impl Stack {
    /// AlexNet without its fully connected layers.
    pub fn alexnet() -> Self {
        "conv(11,4,0,96,lrn) pool(3,2) conv(5,1,2,256,lrn) pool(3,2) \
         conv(3,1,1,384) conv(3,1,1,384) conv(3,1,1,256) pool(3,2)"
            .parse()
            .unwrap()
    }

    /// AlexNet with conv1 at stride 2: twice the grid resolution on both axes
    /// and a 39-frame minimum input instead of 67.
    pub fn alexnet_fine() -> Self {
        "conv(11,2,0,96,lrn) pool(3,2) conv(5,1,2,256,lrn) pool(3,2) \
         conv(3,1,1,384) conv(3,1,1,384) conv(3,1,1,256) pool(3,2)"
            .parse()
            .unwrap()
    }
}

impl FromStr for Stack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut stages = Vec::new();
        let mut convs = 0;
        let mut rest = s.trim();
        while !rest.is_empty() {
            let open = rest
                .find('(')
                .ok_or_else(|| Error::Config(format!("stack: expected '(' in {rest:?}")))?;
            let close = rest
                .find(')')
                .ok_or_else(|| Error::Config(format!("stack: unclosed '(' in {rest:?}")))?;
            let kind = rest[..open].trim();
            let args: Vec<&str> = rest[open + 1..close].split(',').map(str::trim).collect();
            let num = |i: usize| -> Result<usize> {
                args.get(i)
                    .and_then(|a| a.parse().ok())
                    .ok_or_else(|| Error::Config(format!("stack: bad argument {i} in {kind}({})", args.join(","))))
            };
            match kind {
                "conv" => {
                    if !(4..=5).contains(&args.len()) || (args.len() == 5 && args[4] != "lrn") {
                        return Err(Error::Config(format!(
                            "stack: conv takes (kernel,stride,pad,channels[,lrn]), got ({})",
                            args.join(",")
                        )));
                    }
                    convs += 1;
                    stages.push(StageSpec::Conv {
                        name: format!("conv{convs}"),
                        kernel: num(0)?,
                        stride: num(1)?,
                        pad: num(2)?,
                        channels: num(3)?,
                        lrn: args.len() == 5,
                    });
                }
                "pool" => {
                    if args.len() != 2 {
                        return Err(Error::Config(format!(
                            "stack: pool takes (kernel,stride), got ({})",
                            args.join(",")
                        )));
                    }
                    stages.push(StageSpec::Pool {
                        name: format!("pool{convs}"),
                        kernel: num(0)?,
                        stride: num(1)?,
                    });
                }
                other => return Err(Error::Config(format!("stack: unknown stage {other:?}"))),
            }
            rest = rest[close + 1..].trim_start();
        }
        if convs == 0 {
            return Err(Error::Config("stack needs at least one conv".into()));
        }
        for st in &stages {
            let (k, s, _) = st.geometry();
            if k == 0 || s == 0 {
                return Err(Error::Config(format!("{}: kernel and stride must be >= 1", st.name())));
            }
            if let StageSpec::Conv { channels: 0, name, .. } = st {
                return Err(Error::Config(format!("{name}: zero channels")));
            }
        }
        Ok(Stack(stages))
    }
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, st) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            match st {
                StageSpec::Conv {
                    kernel,
                    stride,
                    pad,
                    channels,
                    lrn,
                    ..
                } => {
                    write!(f, "conv({kernel},{stride},{pad},{channels}")?;
                    if *lrn {
                        write!(f, ",lrn")?;
                    }
                    write!(f, ")")?;
                }
                StageSpec::Pool { kernel, stride, .. } => write!(f, "pool({kernel},{stride})")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stack: Stack,
    /// 1 for spectrograms; 3 replicates the spectrogram to match image-pretrained conv1 weights.
    pub input_channels: usize,
    /// Frequency bins of the input spectrogram.
    pub input_bins: usize,
    /// Multiplies every conv width (rounded, at least 1).
    pub channel_scale: f64,
    pub lrn: LrnParams,
    /// Attention MLP width; defaults to the encoder's output channels.
    pub attention_dim: Option<usize>,
    pub lambda: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stack: Stack::alexnet(),
            input_channels: 1,
            input_bins: 200,
            channel_scale: 1.0,
            lrn: LrnParams::default(),
            attention_dim: None,
            lambda: 0.3,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn scaled_channels(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// Channels of the encoder's last conv, i.e. the annotation dimension.
    pub fn output_channels(&self) -> usize {
        self.stack
            .0
            .iter()
            .rev()
            .find_map(|s| match s {
                StageSpec::Conv { channels, .. } => Some(self.scaled_channels(*channels)),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dim.unwrap_or_else(|| self.output_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.input_channels == 1 || self.input_channels == 3) {
            return Err(Error::Config(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return Err(Error::Config(format!("channel_scale {} must be positive", self.channel_scale)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.attention_dim == Some(0) {
            return Err(Error::Config("attention_dim must be >= 1".into()));
        }
        self.lrn.validate()?;
        if let Some(name) = collapse_point(self, self.input_bins) {
            return Err(Error::Config(format!(
                "{} frequency bins collapse below 1 at {name}",
                self.input_bins
            )));
        }
        Ok(())
    }

    /// Smallest number of frames the encoder accepts.
    pub fn min_frames(&self) -> usize {
        // Each stage needs ceil-inverted extents; walk backwards from 1.
        let mut need = 1usize;
        for st in self.stack.0.iter().rev() {
            let (k, s, p) = st.geometry();
            need = ((need - 1) * s + k).saturating_sub(2 * p).max(1);
        }
        need
    }

    /// Centre offset, step and size (in input cells) of one output cell's
    /// receptive field, identical along both axes.
    pub fn receptive_field(&self) -> ReceptiveField {
        let mut rf = ReceptiveField {
            start: 0.0,
            jump: 1,
            size: 1,
        };
        for st in &self.stack.0 {
            let (k, s, p) = st.geometry();
            rf.start += ((k as f64 - 1.0) / 2.0 - p as f64) * rf.jump as f64;
            rf.size += (k - 1) * rf.jump;
            rf.jump *= s;
        }
        rf
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    /// Input coordinate of output cell 0's centre.
    pub start: f64,
    pub jump: usize,
    pub size: usize,
}

impl ReceptiveField {
    pub fn centre(&self, cell: usize) -> f64 {
        self.start + (cell * self.jump) as f64
    }

    /// Nearest output cell (by receptive-field centre) for an input coordinate.
    pub fn nearest_cell(&self, coord: usize, cells: usize) -> usize {
        let pos = (coord as f64 - self.start) / self.jump as f64;
        (pos.round().max(0.0) as usize).min(cells - 1)
    }
}

/// Name of the first stage at which `extent` collapses below one cell.
fn collapse_point(cfg: &ModelConfig, extent: usize) -> Option<String> {
    let mut n = extent;
    for st in &cfg.stack.0 {
        let (k, s, p) = st.geometry();
        n = match conv_output_extent(n, k, s, p) {
            Some(next) => next,
            None => return Some(st.name().to_string()),
        };
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// Output shape `[C, F, T]` after each stage.
    pub stages: Vec<(String, [usize; 3])>,
    /// `(F', T', C)` of the final feature grid.
    pub grid: (usize, usize, usize),
}

impl ShapePlan {
    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Pure floor arithmetic, no allocation of activations.
pub fn infer_shapes(cfg: &ModelConfig, input_shape: [usize; 3]) -> Result<ShapePlan> {
    let [c_in, f, t] = input_shape;
    if c_in != cfg.input_channels {
        return Err(Error::shape(format!(
            "input has {c_in} channels, model expects {}",
            cfg.input_channels
        )));
    }
    let mut cur = [c_in, f, t];
    let mut stages = Vec::with_capacity(cfg.stack.0.len());
    for st in &cfg.stack.0 {
        let (k, s, p) = st.geometry();
        let (Some(h), Some(w)) = (conv_output_extent(cur[1], k, s, p), conv_output_extent(cur[2], k, s, p))
        else {
            return Err(Error::shape(format!(
                "{}: {}x{} input too small for kernel {k} (stride {s}, pad {p})",
                st.name(),
                cur[1],
                cur[2]
            )));
        };
        let c = match st {
            StageSpec::Conv { channels, .. } => cfg.scaled_channels(*channels),
            StageSpec::Pool { .. } => cur[0],
        };
        cur = [c, h, w];
        stages.push((st.name().to_string(), cur));
    }
    Ok(ShapePlan {
        stages,
        grid: (cur[1], cur[2], cur[0]),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage<T> {
    Conv { name: String, params: ConvParams<T>, lrn: bool },
    Pool { name: String, kernel: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    stages: Vec<Stage<T>>,
    pub attention: AttentionParams<T>,
    pub classifier: LinearParams<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub weights: AttentionWeights<T>,
    pub grid: FeatureGrid<T>,
}

/// Activations kept for the backward pass.
enum StageCache<T> {
    Conv {
        input: Tensor<T>,
        pre_relu: Tensor<T>,
        /// Present only for LRN stages.
        post_relu: Option<Tensor<T>>,
    },
    Pool {
        input: Tensor<T>,
        argmax: Vec<usize>,
    },
}

struct Trace<T> {
    caches: Vec<StageCache<T>>,
    grid: FeatureGrid<T>,
    weights: AttentionWeights<T>,
    context: Tensor<T>,
    logits: Tensor<T>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Deterministic initialization: Kaiming-uniform convs, Glorot-uniform
/// attention and classifier, zero biases.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::new();
    let mut channels = cfg.input_channels;
    for st in &cfg.stack.0 {
        match st {
            StageSpec::Conv {
                name,
                kernel,
                stride,
                pad,
                channels: c,
                lrn,
            } => {
                let out = cfg.scaled_channels(*c);
                let fan_in = channels * kernel * kernel;
                let kernels = uniform_tensor(&mut rng, &[out, channels, *kernel, *kernel], (6.0 / fan_in as f64).sqrt());
                stages.push(Stage::Conv {
                    name: name.clone(),
                    params: ConvParams {
                        kernels: kernels.cast(),
                        bias: Tensor::zeros(&[out]),
                        stride: *stride,
                        pad: *pad,
                    },
                    lrn: *lrn,
                });
                channels = out;
            }
            StageSpec::Pool { name, kernel, stride } => stages.push(Stage::Pool {
                name: name.clone(),
                kernel: *kernel,
                stride: *stride,
            }),
        }
    }
    let d = cfg.attention_width();
    let att_bound = (6.0 / (channels + d) as f64).sqrt();
    let w = uniform_tensor(&mut rng, &[d, channels], att_bound);
    let u = uniform_tensor(&mut rng, &[d], att_bound);
    let k = cfg.num_classes;
    let cls = uniform_tensor(&mut rng, &[k, channels], (6.0 / (channels + k) as f64).sqrt());
    Ok(Model {
        config: cfg.clone(),
        stages,
        attention: AttentionParams {
            w: w.cast(),
            b: Tensor::zeros(&[d]),
            u: u.cast(),
            lambda: cfg.lambda,
        },
        classifier: LinearParams {
            weight: cls.cast(),
            bias: Tensor::zeros(&[k]),
        },
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for st in &self.stages {
            if let Stage::Conv { name, params, .. } = st {
                out.push((format!("encoder.{name}.kernels"), &params.kernels));
                out.push((format!("encoder.{name}.bias"), &params.bias));
            }
        }
        out.push(("attention.w".into(), &self.attention.w));
        out.push(("attention.b".into(), &self.attention.b));
        out.push(("attention.u".into(), &self.attention.u));
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            if let Stage::Conv { params, .. } = st {
                out.push(&mut params.kernels);
                out.push(&mut params.bias);
            }
        }
        out.push(&mut self.attention.w);
        out.push(&mut self.attention.b);
        out.push(&mut self.attention.u);
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|st| match st {
                    Stage::Conv { name, params, lrn } => Stage::Conv {
                        name: name.clone(),
                        params: ConvParams {
                            kernels: params.kernels.cast(),
                            bias: params.bias.cast(),
                            stride: params.stride,
                            pad: params.pad,
                        },
                        lrn: *lrn,
                    },
                    Stage::Pool { name, kernel, stride } => Stage::Pool {
                        name: name.clone(),
                        kernel: *kernel,
                        stride: *stride,
                    },
                })
                .collect(),
            attention: AttentionParams {
                w: self.attention.w.cast(),
                b: self.attention.b.cast(),
                u: self.attention.u.cast(),
                lambda: self.attention.lambda,
            },
            classifier: LinearParams {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
        }
    }

    /// Overrides the attention softmax scale.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
        }
        self.attention.lambda = lambda;
        self.config.lambda = lambda;
        Ok(())
    }

    /// `[F, T]` spectrogram to `[C_in, F, T]` network input.
    fn prepare_input(&self, spec: &Tensor<T>) -> Result<Tensor<T>> {
        if spec.rank() != 2 {
            return Err(Error::shape(format!(
                "expected a [bins, frames] spectrogram, got {:?}",
                spec.shape()
            )));
        }
        let [f, t] = spec.shape().try_into().unwrap();
        let frames_needed = self.config.min_frames();
        if t < frames_needed {
            return Err(Error::shape(format!(
                "utterance of {t} frames is too short; model needs at least {frames_needed} frames"
            )));
        }
        infer_shapes(&self.config, [self.config.input_channels, f, t])?;
        let c = self.config.input_channels;
        let mut data = Vec::with_capacity(c * spec.len());
        for _ in 0..c {
            data.extend_from_slice(spec.data());
        }
        Tensor::new(vec![c, f, t], data)
    }

    fn trace(&self, spec: &Tensor<T>) -> Result<Trace<T>> {
        let mut x = self.prepare_input(spec)?;
        let mut caches = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            match st {
                Stage::Conv { params, lrn: use_lrn, .. } => {
                    let z = conv2d(&x, params)?;
                    let r = relu(&z);
                    let (out, post_relu) = if *use_lrn {
                        (lrn(&r, &self.config.lrn)?, Some(r))
                    } else {
                        (r, None)
                    };
                    caches.push(StageCache::Conv {
                        input: x,
                        pre_relu: z,
                        post_relu,
                    });
                    x = out;
                }
                Stage::Pool { kernel, stride, .. } => {
                    let (out, argmax) = maxpool_with_indices(&x, *kernel, *stride)?;
                    caches.push(StageCache::Pool { input: x, argmax });
                    x = out;
                }
            }
        }
        let grid = FeatureGrid::from_channel_major(&x)?;
        let (weights, context) = attention_forward(&grid, &self.attention)?;
        let logits = linear(&context, &self.classifier)?;
        Ok(Trace {
            caches,
            grid,
            weights,
            context,
            logits,
        })
    }

    /// Whole-utterance forward pass: logits, attention weights and the feature grid.
    pub fn forward(&self, spec: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let tr = self.trace(spec)?;
        Ok(ForwardOutput {
            logits: tr.logits,
            weights: tr.weights,
            grid: tr.grid,
        })
    }

    pub fn predict(&self, spec: &Tensor<T>) -> Result<usize> {
        let out = self.forward(spec)?;
        Ok(crate::tensor::argmax(out.logits.data()).unwrap_or(0))
    }

    /// Cross-entropy loss, logits and one gradient per parameter (in
    /// [`Model::named_params`] order).
    pub fn loss_and_grads(&self, spec: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>, Vec<Tensor<T>>)> {
        let tr = self.trace(spec)?;
        let (loss, dlogits) = softmax_cross_entropy(&tr.logits, label)?;
        let cls = linear_backward(&tr.context, &self.classifier, &dlogits)?;
        let att = attention_backward(&tr.grid, &self.attention, &cls.input)?;
        let mut upstream = FeatureGrid::new(att.input)?.to_channel_major();

        let mut encoder_grads: Vec<Tensor<T>> = Vec::new();
        for (st, cache) in self.stages.iter().zip(&tr.caches).rev() {
            match (st, cache) {
                (
                    Stage::Conv { params, .. },
                    StageCache::Conv {
                        input,
                        pre_relu,
                        post_relu,
                    },
                ) => {
                    if let Some(r) = post_relu {
                        upstream = lrn_backward(r, &self.config.lrn, &upstream)?.input;
                    }
                    upstream = relu_backward(pre_relu, &upstream)?.input;
                    let g = conv2d_backward(input, params, &upstream)?;
                    let mut p = g.params.into_iter();
                    let (dk, db) = (p.next().unwrap(), p.next().unwrap());
                    encoder_grads.push(db);
                    encoder_grads.push(dk);
                    upstream = g.input;
                }
                (Stage::Pool { .. }, StageCache::Pool { input, argmax }) => {
                    upstream = route_pool_gradient(input, argmax, &upstream);
                }
                _ => unreachable!("stage and cache kinds always line up"),
            }
        }
        encoder_grads.reverse();
        encoder_grads.extend(att.params);
        encoder_grads.extend(cls.params);
        Ok((loss, tr.logits, encoder_grads))
    }

    /// Loss plus a fingerprint of every ReLU mask and pool argmax. Two inputs
    /// with equal fingerprints lie on the same smooth piece of the network.
    pub fn loss_with_fingerprint(&self, spec: &Tensor<T>, label: usize) -> Result<(T, u64)> {
        let tr = self.trace(spec)?;
        let (loss, _) = softmax_cross_entropy(&tr.logits, label)?;
        let mut h = DefaultHasher::new();
        for cache in &tr.caches {
            match cache {
                StageCache::Conv { pre_relu, .. } => {
                    for &z in pre_relu.data() {
                        (z > T::zero()).hash(&mut h);
                    }
                }
                StageCache::Pool { argmax, .. } => argmax.hash(&mut h),
            }
        }
        Ok((loss, h.finish()))
    }

    pub(crate) fn set_param(&mut self, index: usize, value: Tensor<T>) {
        *self.params_mut()[index] = value;
    }
}

fn route_pool_gradient<T: Real>(input: &Tensor<T>, argmax: &[usize], upstream: &Tensor<T>) -> Tensor<T> {
    let [c, h, w] = input.shape().try_into().unwrap();
    let per_plane = upstream.len() / c;
    let mut dx = vec![T::zero(); c * h * w];
    for (i, (&g, &at)) in upstream.data().iter().zip(argmax).enumerate() {
        dx[(i / per_plane) * h * w + at] += g;
    }
    Tensor::new(input.shape().to_vec(), dx).expect("pool gradient matches input shape")
}
