//! The work behind each CLI verb, callable from tests.

use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use log::{info, warn};
use rayon::prelude::*;

use afcn_core::attention::AttentionWeights;
use afcn_core::checkpoint::{import_encoder, load_checkpoint, save_checkpoint};
use afcn_core::data::{load_manifest, split_folds, synth_corpus, FoldPlan, SynthConfig, Utterance, CLASS_NAMES};
use afcn_core::dsp::{read_wav, spectrogram, spg_file_len, wav_info, Spectrogram};
use afcn_core::eval::{metrics_csv, metrics_report, ConfusionMatrix, MetricsRow};
use afcn_core::gradcheck::{run_suite, CheckReport, GradCheckConfig};
use afcn_core::train::{evaluate, fit, prepare_features, Example, Trainer};
use afcn_core::{build_model, Error, Model, Result};

use crate::config::RunConfig;
use crate::heatmap::{alpha_csv, pgm, scale_log, scale_to_max, upsample_alpha};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn required<'a>(what: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{what} is not set in the run config")))
}

pub fn cache_path(cache_dir: &Path, id: &str) -> PathBuf {
    cache_dir.join(format!("{id}.spg"))
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
    /// `(utterance id, error)` per failed file.
    pub failures: Vec<(String, String)>,
}

fn modified(path: &Path) -> Option<SystemTime> {
    fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// A cache entry is current when its size matches the WAV's frame count and
/// it is no older than the WAV.
fn up_to_date(cfg: &RunConfig, wav: &Path, spg: &Path) -> Result<bool> {
    let Ok(meta) = fs::metadata(spg) else {
        return Ok(false);
    };
    let info = wav_info(wav)?;
    let frames = cfg.spectrogram.num_frames(info.num_samples, info.sample_rate_hz);
    let fresh = match (modified(spg), modified(wav)) {
        (Some(s), Some(w)) => s >= w,
        _ => false,
    };
    Ok(fresh && meta.len() == spg_file_len(cfg.spectrogram.keep_bins, frames))
}

fn extract_one(cfg: &RunConfig, u: &Utterance, out_dir: &Path) -> Result<bool> {
    let dst = cache_path(out_dir, &u.id);
    if up_to_date(cfg, &u.path, &dst)? {
        return Ok(false);
    }
    let spec = spectrogram(&read_wav(&u.path)?, &cfg.spectrogram)?;
    spec.write_spg(&dst)?;
    Ok(true)
}

/// One SPG1 cache file per manifest entry. Failures are collected, not fatal.
pub fn cmd_extract(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<ExtractSummary> {
    let utts = load_manifest(manifest)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let results: Vec<Result<bool>> = utts.par_iter().map(|u| extract_one(cfg, u, out_dir)).collect();
    let mut summary = ExtractSummary::default();
    for (u, r) in utts.iter().zip(results) {
        match r {
            Ok(true) => summary.written += 1,
            Ok(false) => summary.skipped += 1,
            Err(e) => {
                warn!("{}: {e}", u.id);
                summary.failures.push((u.id.clone(), e.to_string()));
            }
        }
    }
    info!(
        "extract: {} written, {} up to date, {} failed",
        summary.written,
        summary.skipped,
        summary.failures.len()
    );
    Ok(summary)
}

pub fn load_example(cfg: &RunConfig, cache_dir: &Path, u: &Utterance) -> Result<Example<f32>> {
    let path = cache_path(cache_dir, &u.id);
    let spec = Spectrogram::read_spg(&path, cfg.spectrogram).map_err(|e| match e {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
            Error::Config(format!("missing feature cache {}; run extract first", path.display()))
        }
        other => other,
    })?;
    Ok(Example {
        id: u.id.clone(),
        features: prepare_features(&spec, cfg.log_eps),
        label: u.label,
    })
}

fn load_examples(cfg: &RunConfig, cache_dir: &Path, utts: &[Utterance], idx: &[usize]) -> Result<Vec<Example<f32>>> {
    idx.par_iter().map(|&i| load_example(cfg, cache_dir, &utts[i])).collect()
}

fn fold_plan(cfg: &RunConfig, fold: usize) -> Result<(Vec<Utterance>, FoldPlan)> {
    let utts = load_manifest(required("manifest", &cfg.manifest)?)?;
    let mut folds = split_folds(&utts, cfg.num_folds)?;
    if fold >= folds.len() {
        return Err(Error::Argument(format!("fold {fold} outside 0..{}", folds.len())));
    }
    let plan = folds.swap_remove(fold);
    Ok((utts, plan))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
}

/// Trains one fold; writes `best.ckpt`, `train_log.csv` and `run.log` under `out_dir`.
pub fn cmd_train(cfg: &RunConfig, fold: usize, out_dir: &Path) -> Result<TrainSummary> {
    let cache = required("cache_dir", &cfg.cache_dir)?;
    let (utts, plan) = fold_plan(cfg, fold)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut run_log = format!("# resolved config\n{}fold = {fold}\n", cfg.to_text());
    write_file(&out_dir.join("run.log"), &run_log)?;

    let train = load_examples(cfg, cache, &utts, &plan.train)?;
    let validation = load_examples(cfg, cache, &utts, &plan.validation)?;
    info!(
        "fold {fold}: {} train, {} validation ({}), test speaker {}",
        train.len(),
        validation.len(),
        plan.validation_speaker,
        plan.test_speaker
    );

    let mut model = build_model::<f32>(&cfg.model, cfg.seed())?;
    if let Some(src) = &cfg.pretrained {
        let rep = import_encoder(src, &mut model, cfg.pretrained_strict)?;
        let _ = writeln!(
            run_log,
            "# imported {} tensors, reduced {:?}, skipped {:?}",
            rep.replaced.len() + rep.reduced.len(),
            rep.reduced,
            rep.skipped
        );
    }
    let log_path = out_dir.join("train_log.csv");
    let mut log_csv = String::from("epoch,train_loss,val_wa,val_ua\n");
    write_file(&log_path, &log_csv)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let result = fit(&mut trainer, &train, &validation, |rec| {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let _ = writeln!(
            log_csv,
            "{},{:.6},{},{}",
            rec.epoch,
            rec.train_loss,
            opt(rec.val_wa),
            opt(rec.val_ua)
        );
        if let Err(e) = fs::write(&log_path, &log_csv) {
            warn!("{}: {e}", log_path.display());
        }
    })?;
    let ckpt = out_dir.join("best.ckpt");
    save_checkpoint(&result.best, &ckpt)?;
    let _ = writeln!(
        run_log,
        "# epochs run = {}\n# best epoch = {}",
        result.history.len(),
        result.best_epoch
    );
    write_file(&out_dir.join("run.log"), &run_log)?;
    Ok(TrainSummary {
        epochs: result.history.len(),
        best_epoch: result.best_epoch,
        checkpoint: ckpt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSelection {
    One(usize),
    All,
}

impl std::str::FromStr for FoldSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            n => n
                .parse()
                .map(Self::One)
                .map_err(|_| format!("expected a fold number or \"all\", got {n:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Scores whole utterances (one forward pass each). A `{fold}` in the
/// checkpoint path is replaced by the fold number. Writes `metrics.csv` and
/// `confusion.csv` (pooled over folds when several are evaluated).
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &str,
    folds: FoldSelection,
    split: Split,
    out_dir: &Path,
) -> Result<Vec<MetricsRow>> {
    let cache = required("cache_dir", &cfg.cache_dir)?;
    let list: Vec<usize> = match folds {
        FoldSelection::One(k) => vec![k],
        FoldSelection::All => (0..cfg.num_folds).collect(),
    };
    let mut matrices = Vec::new();
    for k in list {
        let path = PathBuf::from(checkpoint.replace("{fold}", &k.to_string()));
        let model: Model<f32> = load_checkpoint(&cfg.model, &path)?;
        let (utts, plan) = fold_plan(cfg, k)?;
        let idx = match split {
            Split::Train => &plan.train,
            Split::Validation => &plan.validation,
            Split::Test => &plan.test,
        };
        let examples = load_examples(cfg, cache, &utts, idx)?;
        matrices.push((k.to_string(), evaluate(&model, &examples)?));
    }
    let rows = metrics_report(&matrices)?;
    let mut pooled = ConfusionMatrix::new(cfg.model.num_classes);
    for (_, m) in &matrices {
        pooled.merge(m)?;
    }
    let names = &CLASS_NAMES[..cfg.model.num_classes.min(CLASS_NAMES.len())];
    write_file(&out_dir.join("metrics.csv"), metrics_csv(&rows, names))?;
    write_file(&out_dir.join("confusion.csv"), pooled.to_csv(names))?;
    Ok(rows)
}

/// Attention weights of one utterance plus their upsampled `[bins, frames]` map.
pub fn attention_map(model: &Model<f32>, features: &afcn_core::Tensor<f32>) -> Result<(AttentionWeights<f32>, Vec<f64>)> {
    let out = model.forward(features)?;
    let [bins, frames] = features.shape().try_into().expect("features are [bins, frames]");
    let rf = model.config().receptive_field();
    let up = upsample_alpha(&out.weights, &rf, bins, frames);
    Ok((out.weights, up))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttendOutput {
    pub alpha_csv: PathBuf,
    pub attention_pgm: PathBuf,
    pub spectrogram_pgm: PathBuf,
}

/// Writes `<prefix>_alpha.csv`, `<prefix>_attention.pgm` and `<prefix>_spectrogram.pgm`.
pub fn cmd_attend(cfg: &RunConfig, checkpoint: &Path, wav: &Path, out_prefix: &Path) -> Result<AttendOutput> {
    let model: Model<f32> = load_checkpoint(&cfg.model, checkpoint)?;
    let spec = spectrogram(&read_wav(wav)?, &cfg.spectrogram)?;
    let features = prepare_features(&spec, cfg.log_eps);
    let (weights, up) = attention_map(&model, &features)?;
    let (bins, frames) = (spec.num_bins(), spec.num_frames());
    let with_suffix = |s: &str| {
        let mut p = out_prefix.as_os_str().to_owned();
        p.push(s);
        PathBuf::from(p)
    };
    let out = AttendOutput {
        alpha_csv: with_suffix("_alpha.csv"),
        attention_pgm: with_suffix("_attention.pgm"),
        spectrogram_pgm: with_suffix("_spectrogram.pgm"),
    };
    write_file(&out.alpha_csv, alpha_csv(&weights))?;
    write_file(&out.attention_pgm, pgm(&scale_to_max(&up), bins, frames))?;
    write_file(&out.spectrogram_pgm, pgm(&scale_log(spec.grid.data()), bins, frames))?;
    Ok(out)
}

pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<Vec<CheckReport>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    run_suite(&cfg, corrupt)
}

pub fn cmd_synth(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<usize> {
    let (utts, _) = synth_corpus(cfg, seed, out_dir)?;
    info!("wrote {} utterances to {}", utts.len(), out_dir.display());
    Ok(utts.len())
}
