//! Optimizers, schedules, regularizers and the training loop.

mod optim;
mod regularize;
mod schedule;

pub use optim::{adam_update, sgd_update, Optimizer, OptimizerConfig, OptimizerKind};
pub use regularize::{
    binary_entropy, hard_weight_entropy, regularization_loss, LossSpec, RegKind, ENTROPY_SHARPNESS,
};
pub use schedule::{lr_at, StageController};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Augment;
use crate::autograd::Tape;
use crate::binarize::TrainingProgress;
use crate::block::{Pass, Stage};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::normalize::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub loss: LossSpec,
    pub two_stage: bool,
    pub split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(),
            epochs: 30,
            batch_size: 128,
            warmup_epochs: 2.0,
            loss: LossSpec::default(),
            two_stage: false,
            split_fraction: 0.5,
        }
    }
}

/// One row of the per-epoch metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc";

/// Renders rows with fixed float formatting so reruns are byte-identical.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{:.10},{:.8},{:.6},{:.6}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
        )
        .unwrap();
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Training state that stage switching may touch, for diffing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub weights_binarized: bool,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub train: TrainConfig,
    pub steps_done: u64,
    pub model: Model,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub cfg: TrainConfig,
    pub controller: StageController,
    pub stage: Stage,
    pub steps_done: u64,
    pub steps_per_epoch: usize,
    warmup: f64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, train_len: usize) -> Result<Self> {
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if train_len == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        let warmup = cfg.warmup_epochs.min(cfg.epochs as f64 - 1.0).max(0.0);
        if warmup < cfg.warmup_epochs {
            log::warn!(
                "{} epochs leave room for only {warmup} warm-up epochs",
                cfg.epochs
            );
        }
        let controller = StageController::new(cfg.two_stage, cfg.split_fraction, cfg.epochs)?;
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer.clone()),
            stage: controller.stage_at(0),
            controller,
            steps_per_epoch: train_len.div_ceil(cfg.batch_size),
            steps_done: 0,
            model,
            cfg,
            warmup,
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch * self.cfg.epochs) as u64
    }

    pub fn progress(&self) -> TrainingProgress {
        let t = self.steps_done as f64 / self.total_steps() as f64;
        TrainingProgress::new(t.min(1.0)).expect("fraction in range")
    }

    pub fn control_state(&self) -> ControlState {
        ControlState {
            weights_binarized: self.stage == Stage::Two,
            weight_decay: self.optimizer.weight_decay,
            optimizer: self.optimizer.clone(),
            train: self.cfg.clone(),
            steps_done: self.steps_done,
            model: self.model.clone(),
        }
    }

    /// Enters the stage `epoch` belongs to. Entering stage two turns weight
    /// binarization on and weight decay off.
    pub fn enter_epoch(&mut self, epoch: usize) {
        let stage = self.controller.stage_at(epoch);
        if stage != self.stage {
            log::info!("epoch {epoch}: switching to stage two");
            self.stage = stage;
            if stage == Stage::Two {
                self.optimizer.weight_decay = 0.0;
            }
        }
    }

    /// One optimizer step on a prepared batch. Returns the total loss and
    /// the number of correct predictions.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let pass = Pass::train(self.progress(), self.stage);
        let logits = self.model.forward(&mut tape, x, pass)?;
        let correct = count_correct(tape.value(logits), labels);
        let mut loss = tape.cross_entropy(logits, labels)?;
        if self.cfg.loss.is_active() {
            let ids: Vec<_> = self
                .model
                .params
                .iter()
                .filter(|(_, p)| p.role.is_binarizable())
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                let w = self.model.params.on_tape(&mut tape, id);
                let r = tape.regularizer(w, &self.cfg.loss);
                let r = tape.scale(r, self.cfg.loss.reg_lambda);
                loss = tape.add(loss, r)?;
            }
        }
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {}",
                self.steps_done
            )));
        }
        tape.backward(loss)?;
        self.optimizer
            .step(&mut self.model.params, &tape.param_grads())?;
        self.steps_done += 1;
        Ok((value, correct))
    }

    /// One shuffled pass over `data`. Returns `(lr of the last step, mean
    /// loss, accuracy)`.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        epoch: usize,
        data: &Dataset,
        augment: &Augment,
        rng: &mut R,
    ) -> Result<(f64, f64, f64)> {
        self.enter_epoch(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        let nb = self.steps_per_epoch;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            lr = lr_at(
                epoch as f64 + b as f64 / nb as f64,
                self.cfg.epochs as f64,
                self.warmup,
                self.cfg.optimizer.lr,
            )?;
            self.optimizer.lr = lr;
            let batch = data.subset(idx);
            let x = augment.apply(&batch.images, rng)?;
            if self.steps_done == 0 && self.model.needs_calibration() {
                let pass = Pass {
                    mode: Mode::Calibrate,
                    progress: self.progress(),
                    stage: self.stage,
                };
                self.model.calibrate(&x, pass)?;
            }
            let (l, c) = self.train_step(&x, &batch.labels)?;
            loss_sum += l * idx.len() as f64;
            correct += c;
        }
        Ok((
            lr,
            loss_sum / data.len() as f64,
            correct as f64 / data.len() as f64,
        ))
    }

    pub fn evaluate(&mut self, data: &Dataset, augment: &Augment) -> Result<f64> {
        evaluate(&mut self.model, data, augment)
    }

    /// Trains every epoch, evaluating on `test` after each, and calls
    /// `on_epoch` with every finished row.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        augment: &Augment,
        rng: &mut R,
        mut on_epoch: impl FnMut(&MetricRow),
    ) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let (lr, train_loss, train_acc) = self.train_epoch(epoch, train, augment, rng)?;
            let test_acc = self.evaluate(test, augment)?;
            let row = MetricRow {
                epoch: epoch + 1,
                lr,
                train_loss,
                train_acc,
                test_acc,
            };
            log::info!(
                "epoch {:>3}  lr {:.5}  loss {:.4}  train {:.4}  test {:.4}",
                row.epoch,
                row.lr,
                row.train_loss,
                row.train_acc,
                row.test_acc
            );
            on_epoch(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

const EVAL_BATCH: usize = 250;

/// Eval-mode accuracy of `model` on `data`.
pub fn evaluate(model: &mut Model, data: &Dataset, augment: &Augment) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let x = augment.eval(&data.images.slice_batch(start, end))?;
        let logits = model.predict(&x)?;
        correct += count_correct(&logits, &data.labels[start..end]);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the largest logit per row, first one on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema() {
        let rows = [MetricRow {
            epoch: 1,
            lr: 0.1,
            train_loss: 2.0,
            train_acc: 0.5,
            test_acc: 0.25,
        }];
        let csv = metrics_csv(&rows);
        assert_eq!(
            csv,
            "epoch,lr,train_loss,train_acc,test_acc\n1,0.1000000000,2.00000000,0.500000,0.250000\n"
        );
    }

    #[test]
    fn argmax_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
