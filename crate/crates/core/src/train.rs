//! SGD training with gradient accumulation and early stopping.
//!
//! Utterances have different lengths, so each one is its own forward pass.
//! Gradients of an accumulation window are computed in parallel and summed in
//! window order, which keeps results independent of the thread count.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::eval::{confusion, unweighted_accuracy, weighted_accuracy, ConfusionMatrix};
use crate::layers::{sgd_step, SgdConfig};
use crate::model::{Model, Stage};
use crate::tensor::{argmax, pairwise_sum, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    /// `[bins, frames]`
    pub features: Tensor<T>,
    pub label: usize,
}

/// Network input from a magnitude spectrogram: `log(1 + x/eps)` when
/// `log_eps` is set, the raw magnitudes otherwise.
pub fn prepare_features<T: Real>(spec: &Spectrogram, log_eps: Option<f64>) -> Tensor<T> {
    match log_eps {
        Some(eps) => spec.log_compressed(eps).grid.cast(),
        None => spec.grid.cast(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Utterances per optimizer step; gradients are averaged over the window.
    pub accumulate: usize,
    pub max_epochs: usize,
    /// Epochs without a validation UA improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Freeze every encoder stage up to and including this one.
    pub freeze_through: Option<String>,
    /// Stop once the whole training set is classified correctly.
    pub stop_at_perfect_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            accumulate: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            freeze_through: None,
            stop_at_perfect_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the predictions made while training, before each update.
    pub running_train_accuracy: f64,
    pub val_wa: Option<f64>,
    pub val_ua: Option<f64>,
}

pub struct Trainer<T> {
    model: Model<T>,
    velocity: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
}

/// Indices of the parameters owned by stages up to and including `name`.
fn frozen_mask<T: Real>(model: &Model<T>, name: &str) -> Result<Vec<bool>> {
    let stages = model.stages();
    let last = stages
        .iter()
        .position(|s| match s {
            Stage::Conv { name: n, .. } | Stage::Pool { name: n, .. } => n == name,
        })
        .ok_or_else(|| Error::Config(format!("freeze_through: no encoder stage named {name:?}")))?;
    let mut mask = Vec::new();
    for (i, st) in stages.iter().enumerate() {
        if let Stage::Conv { .. } = st {
            mask.extend([i <= last, i <= last]);
        }
    }
    mask.resize(model.named_params().len(), false);
    Ok(mask)
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        if cfg.accumulate == 0 {
            return Err(Error::Config("accumulate must be at least 1".into()));
        }
        let frozen = match &cfg.freeze_through {
            Some(name) => frozen_mask(&model, name)?,
            None => vec![false; model.named_params().len()],
        };
        let velocity = model.named_params().iter().map(|(_, t)| Tensor::zeros_like(t)).collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            velocity,
            frozen,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One optimizer step on `batch`. Returns per-example losses and
    /// predictions, both computed before the update.
    pub fn step(&mut self, batch: &[&Example<T>]) -> Result<(Vec<f64>, Vec<usize>)> {
        let model = &self.model;
        let results: Vec<_> = batch
            .par_iter()
            .map(|ex| model.loss_and_grads(&ex.features, ex.label))
            .collect();
        let mut sum: Option<Vec<Tensor<T>>> = None;
        let mut losses = Vec::with_capacity(batch.len());
        let mut preds = Vec::with_capacity(batch.len());
        for r in results {
            let (loss, logits, grads) = r?;
            losses.push(loss.as_f64());
            preds.push(argmax(logits.data()).unwrap_or(0));
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g)?;
                    }
                }
            }
        }
        let Some(mut grads) = sum else {
            return Ok((losses, preds));
        };
        let inv = T::of(1.0 / batch.len() as f64);
        self.step += 1;
        for (((p, g), v), frozen) in self
            .model
            .params_mut()
            .into_iter()
            .zip(grads.iter_mut())
            .zip(self.velocity.iter_mut())
            .zip(&self.frozen)
        {
            if *frozen {
                continue;
            }
            g.scale(inv);
            sgd_step(p, g, v, &self.cfg.sgd)?;
        }
        if !self.model.is_finite() || losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { step: self.step });
        }
        Ok((losses, preds))
    }

    /// One shuffled pass over `train`: mean loss and running accuracy.
    pub fn train_epoch(&mut self, train: &[Example<T>]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::arg("empty training set"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut losses = Vec::with_capacity(train.len());
        let mut right = 0usize;
        for window in order.chunks(self.cfg.accumulate) {
            let batch: Vec<&Example<T>> = window.iter().map(|&i| &train[i]).collect();
            let (l, p) = self.step(&batch)?;
            right += p.iter().zip(&batch).filter(|(p, ex)| **p == ex.label).count();
            losses.extend(l);
        }
        Ok((pairwise_sum(&losses) / losses.len() as f64, right as f64 / train.len() as f64))
    }
}

/// Predictions in example order; utterances are scored in parallel.
pub fn predict_all<T: Real>(model: &Model<T>, examples: &[Example<T>]) -> Result<Vec<usize>> {
    examples.par_iter().map(|ex| model.predict(&ex.features)).collect()
}

pub fn evaluate<T: Real>(model: &Model<T>, examples: &[Example<T>]) -> Result<ConfusionMatrix> {
    let preds = predict_all(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    confusion(&preds, &labels, model.config().num_classes)
}

pub struct FitResult<T> {
    /// Best model by validation UA, or the final model without validation data.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains until `max_epochs`, until validation UA has not improved for more
/// than `patience` epochs, or (optionally) until the training set is fitted.
pub fn fit<T: Real>(
    trainer: &mut Trainer<T>,
    train: &[Example<T>],
    validation: &[Example<T>],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult<T>> {
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=trainer.cfg.max_epochs {
        let (train_loss, running) = trainer.train_epoch(train)?;
        let (val_wa, val_ua) = if validation.is_empty() {
            (None, None)
        } else {
            let m = evaluate(trainer.model(), validation)?;
            (Some(weighted_accuracy(&m)?), Some(unweighted_accuracy(&m)?))
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            running_train_accuracy: running,
            val_wa,
            val_ua,
        };
        info!(
            "epoch {epoch}: loss {train_loss:.5} running acc {running:.3} val wa {val_wa:?} ua {val_ua:?}"
        );
        on_epoch(&rec);
        history.push(rec);

        if let Some(ua) = val_ua {
            if best.as_ref().is_none_or(|(b, _, _)| ua > *b) {
                best = Some((ua, epoch, trainer.model().clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > trainer.cfg.patience {
                    debug!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
        if trainer.cfg.stop_at_perfect_train && running == 1.0 {
            let m = evaluate(trainer.model(), train)?;
            if m.trace() == m.total() {
                debug!("training set fitted after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (history.len(), trainer.model().clone()),
    };
    Ok(FitResult {
        best,
        best_epoch,
        history,
    })
}
