//! CCC loss, the epoch loop and dev-set model selection.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LogMelSpectrogram;
use crate::model::{Checkpoint, Cnn14, ModelError, Standardization, TrainingMeta};
use crate::nn::{sgd_step, Element, Graph, Mode, NnError, OptimizerState, SgdConfig, Var};

/// Added to the CCC denominator so constant batches stay finite.
pub const CCC_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("{0} partition needs at least 2 segments, has {1}")]
    EmptyPartition(&'static str, usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// `(mean x, mean y, var x, var y, cov)` with population moments.
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    (mx, my, vx / n, vy / n, cov / n)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), TrainError> {
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(TrainError::TooShort(x.len()));
    }
    Ok(())
}

/// Concordance correlation coefficient
/// `2 cov / (var x + var y + (mean x - mean y)^2 + 1e-8)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
    check_pair(x, y)?;
    let (mx, my, vx, vy, cov) = moments(x, y);
    Ok(2.0 * cov / (vx + vy + (mx - my) * (mx - my) + CCC_EPS))
}

/// `1 - ccc(pred, target)` and its gradient with respect to `pred`.
pub fn ccc_loss_and_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let (mx, my, vx, vy, cov) = moments(pred, target);
    let d = vx + vy + (mx - my) * (mx - my) + CCC_EPS;
    let value = 1.0 - 2.0 * cov / d;
    // d ccc / d x_i = [2 (y_i - my) / n * D - 2 cov * 2 (x_i - my) / n] / D^2
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&x, &y)| -(2.0 * (y - my) / n * d - 2.0 * cov * 2.0 * (x - my) / n) / (d * d))
        .collect();
    Ok((value, grad))
}

/// Appends `1 - ccc(pred, target)` to the tape; `pred` holds N values.
pub fn ccc_loss<T: Element>(g: &mut Graph<'_, T>, pred: Var, target: &[f64]) -> Result<Var, TrainError> {
    let x: Vec<f64> = g.value(pred).iter().map(|v| v.as_f64()).collect();
    let (value, grad) = ccc_loss_and_grad(&x, target)?;
    Ok(g.external_scalar(pred, value, grad)?)
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Option<f64> {
    (preds.len() == targets.len() && !preds.is_empty())
        .then(|| preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// One labelled feature map.
#[derive(Debug, Clone)]
pub struct Example {
    pub segment_id: String,
    pub runner_id: String,
    pub features: LogMelSpectrogram,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub shuffle_seed: u64,
    /// Batch size for dev-set inference and batch-norm recalibration.
    pub eval_batch_size: usize,
    /// Re-estimate batch-norm statistics without dropout after every epoch.
    #[serde(default = "yes")]
    pub recalibrate_batch_norm: bool,
    /// Refit the output's scale and offset on the train set in eval mode
    /// after every epoch (applied to the saved snapshots only).
    #[serde(default = "yes")]
    pub calibrate_output: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 24,
            optimizer: SgdConfig::default(),
            shuffle_seed: 0,
            eval_batch_size: 32,
            recalibrate_batch_norm: true,
            calibrate_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.eval_batch_size == 0 {
            return bad("eval batch size must be positive");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return bad("optimizer needs lr > 0, momentum in [0, 1), weight decay >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_mae: f64,
    pub dev_ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest dev CCC, earliest on ties.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// `epoch,train_loss,dev_mae,dev_ccc`, floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_mae,dev_ccc\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.dev_mae, r.dev_ccc));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// 1-based index of the earliest maximum; NaN never wins.
pub fn select_best_epoch(dev_ccc: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &c) in dev_ccc.iter().enumerate() {
        if c.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i + 1)
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Snapshot after the best epoch, as evaluated on dev.
    pub best: Checkpoint,
    /// Snapshot after the last epoch, as evaluated on dev.
    pub last: Cnn14,
}

/// Eval-mode predictions for `examples`, in order. Batches run in parallel
/// on the current rayon pool; each item's prediction does not depend on the
/// batch it lands in.
pub fn predict(model: &Cnn14, examples: &[&Example], batch_size: usize) -> Result<Vec<f64>, ModelError> {
    let chunks: Vec<Result<Vec<f64>, ModelError>> = examples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let maps: Vec<&LogMelSpectrogram> = chunk.iter().map(|e| &e.features).collect();
            let x = model.batch_maps(&maps)?;
            Ok(model.predict(&x)?.into_iter().map(f64::from).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(examples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Mix of the shuffle seed, epoch and batch index for the dropout stream.
fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ batch as u64
}

/// Batches of `batch_size` over `n` shuffled items; a final batch of one is
/// dropped.
fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

/// Trains `model` in place with CCC loss on raw targets and returns the
/// history plus the best-dev-CCC snapshot.
///
/// Input standardization is fitted on the training maps when the model does
/// not carry one yet.
///
/// With dropout, train-mode and eval-mode activations differ in scale: batch
/// norm running statistics are gathered on dropout-perturbed inputs, and the
/// time max-pool after the last dropout sees inflated survivors. After each
/// epoch the running statistics are re-estimated with dropout off
/// (`recalibrate_batch_norm`) and the output's scale and offset are refit on
/// the train set in eval mode (`calibrate_output`). The refit only touches
/// the snapshot that is scored and saved; `model` keeps training unchanged.
pub fn train(
    model: &mut Cnn14,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(TrainError::EmptyPartition("train", train_set.len()));
    }
    if dev_set.len() < 2 {
        return Err(TrainError::EmptyPartition("dev", dev_set.len()));
    }
    if model.standardization().is_none() {
        let n_mels = model.config().n_mels;
        let crops: Vec<LogMelSpectrogram> = train_set
            .iter()
            .map(|e| {
                model
                    .config()
                    .crop_frames
                    .and_then(|c| e.features.center_crop(c))
                    .unwrap_or_else(|| e.features.clone())
            })
            .collect();
        let s = Standardization::fit(crops.iter().map(|c| c.values.as_slice()), n_mels)
            .ok_or(TrainError::EmptyPartition("train", 0))?;
        model.set_standardization(s)?;
    }

    let mut state = OptimizerState::new(cfg.optimizer, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let dev_refs: Vec<&Example> = dev_set.iter().collect();
    let dev_targets: Vec<f64> = dev_set.iter().map(|e| e.target).collect();

    let train_refs: Vec<&Example> = train_set.iter().collect();
    let train_targets: Vec<f64> = train_set.iter().map(|e| e.target).collect();
    let mut last: Option<Cnn14> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, idx) in batches(&order, cfg.batch_size).enumerate() {
            let maps: Vec<&LogMelSpectrogram> = idx.iter().map(|&i| &train_set[i].features).collect();
            let targets: Vec<f64> = idx.iter().map(|&i| train_set[i].target).collect();
            let x = model.standardize(&model.batch_maps(&maps)?)?;
            let (loss, grads, stats) = {
                let mut g = Graph::new(model.params(), Mode::Train, dropout_seed(cfg.shuffle_seed, epoch, bi));
                let xv = g.input(x);
                let vars = model.forward_graph(&mut g, xv)?;
                let pred = g.reshape(vars.output, vec![idx.len()])?;
                let loss = ccc_loss(&mut g, pred, &targets)?;
                let value = g.value(loss)[0] as f64;
                (value, g.backward(loss)?, g.take_batch_stats())
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }
            grads.store_into(model.params_mut())?;
            sgd_step(model.params_mut(), &mut state)?;
            model.apply_batch_stats(&stats);
            loss_sum += loss;
            n_batches += 1;
        }

        if cfg.recalibrate_batch_norm && model.config().dropout_p > 0.0 {
            let batches = train_set
                .chunks(cfg.eval_batch_size)
                .filter(|c| c.len() >= 2)
                .map(|c| model.batch_maps(&c.iter().map(|e| &e.features).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>, _>>()?;
            model.recalibrate_batch_norm(&batches)?;
        }
        let mut snapshot = model.clone();
        if cfg.calibrate_output {
            let fitted = predict(model, &train_refs, cfg.eval_batch_size)?;
            let (scale, offset) = least_squares_affine(&fitted, &train_targets);
            snapshot.rescale_output(scale, offset);
        }
        let preds = predict(&snapshot, &dev_refs, cfg.eval_batch_size)?;
        let dev_mae = mae(&preds, &dev_targets).expect("dev set is non-empty");
        let dev_ccc = ccc(&preds, &dev_targets)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            dev_mae,
            dev_ccc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, dev MAE {:.4}, dev CCC {:.4}",
            rec.train_loss,
            rec.dev_mae,
            rec.dev_ccc
        );
        if best.as_ref().is_none_or(|(b, _)| dev_ccc > *b) {
            snapshot.meta = TrainingMeta {
                epoch: Some(epoch),
                dev_mae: Some(dev_mae),
                dev_ccc: Some(dev_ccc),
            };
            model.meta = snapshot.meta.clone();
            best = Some((dev_ccc, Checkpoint::from_model(&snapshot)));
        }
        records.push(rec);
        last = Some(snapshot);
    }

    let ccc_seq: Vec<f64> = records.iter().map(|r| r.dev_ccc).collect();
    let best_epoch = select_best_epoch(&ccc_seq).unwrap_or(1);
    let best = match best {
        Some((_, ck)) => ck,
        // every dev CCC was NaN; keep the final state
        None => Checkpoint::from_model(model),
    };
    Ok(TrainOutcome {
        history: TrainHistory {
            epochs: records,
            best_epoch,
        },
        best,
        last: last.unwrap_or_else(|| model.clone()),
    })
}

/// `(scale, offset)` minimizing the squared error of `scale * pred + offset`
/// against `target`. Constant predictions get scale 0 and the target mean.
pub fn least_squares_affine(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let var: f64 = pred.iter().map(|p| (p - mp).powi(2)).sum();
    let cov: f64 = pred.iter().zip(target).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let scale = if var > 1e-12 * n { cov / var } else { 0.0 };
    (scale, mt - scale * mp)
}
