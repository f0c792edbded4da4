//! Adagrad training loop with best-validation checkpointing.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Batch, DropoutMasks, EncoderDecoder, LossParts};
use crate::dataset::{Dataset, TrajectorySample};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    /// Starting value of the squared-gradient accumulators.
    pub initial_accumulator: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability that a decoder step is fed the true previous label rather
    /// than the model's own output.
    pub teacher_forcing: f64,
    /// Weight of the maneuver cross-entropy term.
    pub beta: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Samples per gradient task inside a batch.
    pub chunk: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epsilon: 1e-8,
            initial_accumulator: 0.0,
            batch_size: 16,
            epochs: 60,
            teacher_forcing: 1.0,
            beta: 0.2,
            clip_norm: 5.0,
            chunk: 8,
            seed: 7,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::Config("teacher forcing ratio must lie in [0, 1]".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.batch_size == 0 || self.chunk == 0 {
            return Err(Error::Config("batch size and chunk must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.initial_accumulator >= 0.0) {
            return Err(Error::Config("epsilon must be positive and the initial accumulator non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_class_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    /// Epoch of the retained checkpoint; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path, with_acc: bool) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if with_acc {
            writeln!(f, "epoch,train_mse,val_mse,val_class_acc")?;
        } else {
            writeln!(f, "epoch,train_mse,val_mse")?;
        }
        for r in &self.curve {
            write!(f, "{},{},{}", r.epoch, r.train_mse, r.val_mse)?;
            if with_acc {
                write!(f, ",{}", r.val_class_acc.unwrap_or(f64::NAN))?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Per-parameter Adagrad state.
#[derive(Debug, Clone)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accum: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(model: &EncoderDecoder, lr: f64, eps: f64, initial: f64) -> Self {
        let accum = model.param_slices().iter().map(|s| vec![initial; s.len()]).collect();
        Self { lr, eps, accum }
    }

    pub fn step(&mut self, model: &mut EncoderDecoder, grad: &EncoderDecoder) {
        for ((p, g), acc) in model.param_slices_mut().into_iter().zip(grad.param_slices()).zip(&mut self.accum) {
            for ((pi, gi), ai) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *ai += gi * gi;
                *pi -= self.lr * gi / (ai.sqrt() + self.eps);
            }
        }
    }
}

fn add_into(acc: &mut EncoderDecoder, g: &EncoderDecoder) {
    for (a, b) in acc.param_slices_mut().into_iter().zip(g.param_slices()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn grad_norm(g: &EncoderDecoder) -> f64 {
    g.param_slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Batch loss and gradient, evaluated in fixed-size chunks and reduced in
/// chunk order. Dropout masks come from a stream keyed by `mask_key`.
pub fn batch_gradient(
    model: &EncoderDecoder,
    samples: &[&TrajectorySample],
    cfg: &TrainConfig,
    mask_key: Option<u64>,
) -> (LossParts, EncoderDecoder) {
    let b = samples.len();
    let n_chunks = b.div_ceil(cfg.chunk);
    let parts = par::map_range(cfg.exec, n_chunks, |ci| {
        let lo = ci * cfg.chunk;
        let hi = (lo + cfg.chunk).min(b);
        let batch = Batch::from_samples(&samples[lo..hi]);
        let mut r = mask_key.map(|k| rng::stream(cfg.seed ^ k.rotate_left(17), ci as u64));
        let masks = r.as_mut().map(|r| DropoutMasks::sample(model, hi - lo, r));
        let teacher = match r.as_mut() {
            Some(r) if cfg.teacher_forcing < 1.0 => Some(DMatrix::from_fn(batch.targets.nrows(), hi - lo, |_, _| {
                if r.random::<f64>() < cfg.teacher_forcing {
                    1.0
                } else {
                    0.0
                }
            })),
            _ => None,
        };
        let w = (hi - lo) as f64 / b as f64;
        let trace = model.forward_train_mixed(&batch, masks.as_ref(), teacher);
        let loss = model.loss(&trace, &batch, cfg.beta);
        let g = model.backward(&trace, &batch, masks.as_ref(), cfg.beta, w);
        (loss, w, g)
    });
    let mut total = model.zeros_like();
    let mut loss = LossParts { mse: 0.0, cross_entropy: 0.0, total: 0.0 };
    for (l, w, g) in &parts {
        add_into(&mut total, g);
        loss.mse += w * l.mse;
        loss.cross_entropy += w * l.cross_entropy;
        loss.total += w * l.total;
    }
    (loss, total)
}

/// Trains in place. On return `model` holds the best-validation weights.
pub fn train(model: &mut EncoderDecoder, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    model: &mut EncoderDecoder,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation partitions must be non-empty".into()));
    }
    let mut opt = Adagrad::new(model, cfg.learning_rate, cfg.epsilon, cfg.initial_accumulator);
    let mut order_rng = rng::stream(cfg.seed, u64::MAX);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let (v0, _) = model.evaluate(&data.val);
    let mut best = model.clone();
    let mut best_val = v0;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut mse_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let samples: Vec<&TrajectorySample> = idx.iter().map(|&i| &data.train[i]).collect();
            step += 1;
            let (loss, mut grad) = batch_gradient(model, &samples, cfg, Some(step));
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("non-finite loss at step {step}") });
            }
            let norm = grad_norm(&grad);
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("non-finite gradient at step {step}") });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for sl in grad.param_slices_mut() {
                    sl.iter_mut().for_each(|v| *v *= s);
                }
            }
            opt.step(model, &grad);
            mse_sum += loss.mse * idx.len() as f64;
        }
        let (val_mse, val_acc) = model.evaluate(&data.val);
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch, detail: "non-finite validation loss".into() });
        }
        let rec = EpochRecord {
            epoch,
            train_mse: mse_sum / data.train.len() as f64,
            val_mse,
            val_class_acc: val_acc,
        };
        on_epoch(&rec);
        curve.push(rec);
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    *model = best;
    Ok(TrainReport { curve, best_epoch, best_val_mse: best_val })
}
