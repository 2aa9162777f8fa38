//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use afcn_core::dsp::SpectrogramConfig;
use afcn_core::layers::{LrnParams, SgdConfig};
use afcn_core::model::{ModelConfig, Stack};
use afcn_core::train::TrainConfig;
use afcn_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub spectrogram: SpectrogramConfig,
    /// `log(1 + x/eps)` input compression; `None` feeds raw magnitudes.
    pub log_eps: Option<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_folds: usize,
    pub pretrained: Option<PathBuf>,
    pub pretrained_strict: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            cache_dir: None,
            spectrogram: SpectrogramConfig::default(),
            log_eps: Some(1.0),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            num_folds: 5,
            pretrained: None,
            pretrained_strict: false,
        }
    }
}

const KEYS: &[&str] = &[
    "manifest",
    "cache_dir",
    "window_ms",
    "shift_ms",
    "dft_len",
    "keep_bins",
    "log_eps",
    "stack",
    "input_channels",
    "channel_scale",
    "attention_dim",
    "lambda",
    "num_classes",
    "lrn_size",
    "lrn_k",
    "lrn_alpha",
    "lrn_beta",
    "lr",
    "momentum",
    "weight_decay",
    "accumulate",
    "max_epochs",
    "patience",
    "freeze_through",
    "stop_at_perfect_train",
    "seed",
    "num_folds",
    "pretrained",
    "pretrained_strict",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    (!matches!(value, "" | "none")).then_some(value)
}

impl RunConfig {
    /// Relative paths resolve against `base`, normally the config file's directory.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.model.input_bins = cfg.spectrogram.keep_bins;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = |v: &str| optional(v).map(|p| base.join(p));
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "manifest" => self.manifest = path(value),
            "cache_dir" => self.cache_dir = path(value),
            "window_ms" => self.spectrogram.window_ms = parse_num(key, value)?,
            "shift_ms" => self.spectrogram.shift_ms = parse_num(key, value)?,
            "dft_len" => self.spectrogram.dft_len = parse_num(key, value)?,
            "keep_bins" => self.spectrogram.keep_bins = parse_num(key, value)?,
            "log_eps" => self.log_eps = optional(value).map(|v| parse_num(key, v)).transpose()?,
            "stack" => {
                m.stack = match value {
                    "alexnet" => Stack::alexnet(),
                    "alexnet_fine" => Stack::alexnet_fine(),
                    other => other.parse()?,
                }
            }
            "input_channels" => m.input_channels = parse_num(key, value)?,
            "channel_scale" => m.channel_scale = parse_num(key, value)?,
            "attention_dim" => m.attention_dim = optional(value).map(|v| parse_num(key, v)).transpose()?,
            "lambda" => m.lambda = parse_num(key, value)?,
            "num_classes" => m.num_classes = parse_num(key, value)?,
            "lrn_size" => m.lrn.size = parse_num(key, value)?,
            "lrn_k" => m.lrn.k = parse_num(key, value)?,
            "lrn_alpha" => m.lrn.alpha = parse_num(key, value)?,
            "lrn_beta" => m.lrn.beta = parse_num(key, value)?,
            "lr" => t.sgd.lr = parse_num(key, value)?,
            "momentum" => t.sgd.momentum = parse_num(key, value)?,
            "weight_decay" => t.sgd.weight_decay = parse_num(key, value)?,
            "accumulate" => t.accumulate = parse_num(key, value)?,
            "max_epochs" => t.max_epochs = parse_num(key, value)?,
            "patience" => t.patience = parse_num(key, value)?,
            "freeze_through" => t.freeze_through = optional(value).map(str::to_string),
            "stop_at_perfect_train" => t.stop_at_perfect_train = parse_bool(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "num_folds" => self.num_folds = parse_num(key, value)?,
            "pretrained" => self.pretrained = path(value),
            "pretrained_strict" => self.pretrained_strict = parse_bool(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Every key with its resolved value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let s = &self.spectrogram;
        let m = &self.model;
        let t = &self.train;
        let LrnParams { size, k, alpha, beta } = m.lrn;
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = t.sgd;
        let values: Vec<(&str, String)> = vec![
            ("manifest", opt_path(&self.manifest)),
            ("cache_dir", opt_path(&self.cache_dir)),
            ("window_ms", s.window_ms.to_string()),
            ("shift_ms", s.shift_ms.to_string()),
            ("dft_len", s.dft_len.to_string()),
            ("keep_bins", s.keep_bins.to_string()),
            ("log_eps", opt(self.log_eps.map(|v| v.to_string()))),
            ("stack", m.stack.to_string()),
            ("input_channels", m.input_channels.to_string()),
            ("channel_scale", m.channel_scale.to_string()),
            ("attention_dim", opt(m.attention_dim.map(|v| v.to_string()))),
            ("lambda", m.lambda.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("lrn_size", size.to_string()),
            ("lrn_k", k.to_string()),
            ("lrn_alpha", alpha.to_string()),
            ("lrn_beta", beta.to_string()),
            ("lr", lr.to_string()),
            ("momentum", momentum.to_string()),
            ("weight_decay", weight_decay.to_string()),
            ("accumulate", t.accumulate.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("freeze_through", opt(t.freeze_through.clone())),
            ("stop_at_perfect_train", t.stop_at_perfect_train.to_string()),
            ("seed", t.seed.to_string()),
            ("num_folds", self.num_folds.to_string()),
            ("pretrained", opt_path(&self.pretrained)),
            ("pretrained_strict", self.pretrained_strict.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("lamda = 0.3\n", Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("unknown key \"lamda\""), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn resolved_text_roundtrips() {
        let text = "# desk scale\nstack = alexnet_fine\nchannel_scale = 0.25\nlog_eps = none\nseed = 9 # trailing\nfreeze_through = conv2\n";
        let cfg = RunConfig::parse(text, Path::new("/runs")).unwrap();
        assert_eq!(cfg.model.stack, Stack::alexnet_fine());
        assert_eq!(cfg.log_eps, None);
        assert_eq!(cfg.seed(), 9);
        let again = RunConfig::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn keep_bins_drives_model_input() {
        let cfg = RunConfig::parse("keep_bins = 120\n", Path::new(".")).unwrap();
        assert_eq!(cfg.model.input_bins, 120);
        assert!(RunConfig::parse("keep_bins = 20\n", Path::new(".")).is_err());
    }

    #[test]
    fn bad_values() {
        assert!(RunConfig::parse("lr = fast\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("just words\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("stop_at_perfect_train = maybe\n", Path::new(".")).is_err());
    }
}
