//! Learning-rate schedules and the mini-batch training loop.
//!
//! The cyclically annealed schedule (CALR) runs a triangular cyclical
//! learning rate between `lr_lb` and an upper bound that is multiplied by
//! `exp(decay)` at the start of every epoch and reset to its initial value
//! once it falls to `lr_lb` or below.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Sentence};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::models::{Dropout, EmbeddingGrad, EmbeddingLayer, Gradients, Model};

/// Triangular cyclical learning rate.
///
/// Rises from `lr_lb` by `(lr_ub - lr_lb) / step_size` per iteration for
/// `step_size` iterations, then falls back; the period is `2 * step_size`.
pub fn clr(iteration: u64, step_size: u64, lr_lb: f64, lr_ub: f64) -> f64 {
    let step_size = step_size.max(1);
    let bump = (lr_ub - lr_lb) / step_size as f64;
    let cycle = iteration % (2 * step_size);
    if cycle < step_size {
        lr_lb + cycle as f64 * bump
    } else {
        lr_ub - (cycle - step_size) as f64 * bump
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalrConfig {
    pub lr_lb: f64,
    pub lr_ub_init: f64,
    /// Iterations per half cycle; `None` means twice the batches per epoch.
    pub step_size: Option<u64>,
    /// Per-epoch exponent applied to the upper bound.
    pub decay: f64,
}

impl Default for CalrConfig {
    fn default() -> Self {
        Self {
            lr_lb: 1e-5,
            lr_ub_init: 1e-3,
            step_size: None,
            decay: -0.05,
        }
    }
}

impl CalrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_lb > 0.0 && self.lr_lb.is_finite()) {
            return Err(Error::Config(format!("lr_lb must be positive, got {}", self.lr_lb)));
        }
        if !(self.lr_ub_init > self.lr_lb && self.lr_ub_init.is_finite()) {
            return Err(Error::Config(format!(
                "lr_ub_init ({}) must exceed lr_lb ({})",
                self.lr_ub_init, self.lr_lb
            )));
        }
        if self.step_size == Some(0) {
            return Err(Error::Config("step_size must be at least 1".into()));
        }
        if !(self.decay < 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be negative, got {}", self.decay)));
        }
        Ok(())
    }

    pub fn resolved_step_size(&self, batches_per_epoch: usize) -> u64 {
        self.step_size.unwrap_or(2 * batches_per_epoch.max(1) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalrState {
    pub current_ub: f64,
    /// Global batch counter, never reset between epochs.
    pub iteration: u64,
    /// Number of epoch updates applied.
    pub epoch: u64,
}

impl CalrState {
    pub fn new(cfg: &CalrConfig) -> Self {
        Self {
            current_ub: cfg.lr_ub_init,
            iteration: 0,
            epoch: 0,
        }
    }

    pub fn lr(&self, cfg: &CalrConfig, step_size: u64) -> f64 {
        clr(self.iteration, step_size, cfg.lr_lb, self.current_ub)
    }
}

/// Start-of-epoch update: decay the upper bound, then restart it if it has
/// reached the lower bound.
pub fn calr_epoch_update(state: CalrState, cfg: &CalrConfig) -> CalrState {
    let mut ub = state.current_ub * cfg.decay.exp();
    if ub <= cfg.lr_lb {
        ub = cfg.lr_ub_init;
    }
    CalrState {
        current_ub: ub,
        epoch: state.epoch + 1,
        ..state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// SGD at `lr_ub_init`.
    Constant,
    /// SGD with a triangular cycle between `lr_lb` and `lr_ub_init`.
    Clr,
    /// SGD with the cyclically annealed schedule.
    Calr,
    /// AdaGrad at `lr_ub_init`.
    Adagrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub l2_weight: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_weight: 0.005,
            dropout: 0.4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            schedule: Schedule::Calr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::Config(format!("l2_weight {} must be non-negative", self.l2_weight)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// `w ← w − lr·(g + l2·w)`.
pub fn sgd_update(param: &mut DenseMatrix, grad: &DenseMatrix, lr: f64, l2: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape {
            op: "sgd_update",
            left: param.shape(),
            right: grad.shape(),
        });
    }
    for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * (g + l2 * *w);
    }
    Ok(())
}

fn sgd_rows(table: &mut DenseMatrix, rows: &crate::models::RowGrad, lr: f64, l2: f64) -> Result<()> {
    if rows.width != table.cols() {
        return Err(Error::Shape {
            op: "sgd_rows",
            left: table.shape(),
            right: (rows.rows.len(), rows.width),
        });
    }
    for (&r, g) in &rows.rows {
        if r >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id: r,
                vocab_size: table.rows(),
            });
        }
        for (w, gv) in table.row_mut(r).iter_mut().zip(g) {
            *w -= lr * (gv + l2 * *w);
        }
    }
    Ok(())
}

/// One SGD step with L2 decay. Embedding rows are decayed only when they
/// appear in the batch.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, l2_weight: f64) -> Result<()> {
    let params = model.dense_params_mut();
    if params.len() != grads.dense.len() {
        return Err(Error::invalid("gradient count does not match model"));
    }
    for (w, g) in params.into_iter().zip(&grads.dense) {
        sgd_update(w, g, lr, l2_weight)?;
    }
    match (model.embedding_mut(), &grads.embedding) {
        (EmbeddingLayer::Plain(t), EmbeddingGrad::Plain(g)) => sgd_rows(t.weights_mut(), g, lr, l2_weight),
        (EmbeddingLayer::Factorized(f), EmbeddingGrad::Factorized { w_a, w_b }) => {
            sgd_rows(&mut f.w_a, w_a, lr, l2_weight)?;
            sgd_update(&mut f.w_b, w_b, lr, l2_weight)
        }
        _ => Err(Error::invalid("gradient/model embedding kind mismatch")),
    }
}

const ADAGRAD_EPS: f64 = 1e-8;

/// `acc += g²; w ← w − lr·g/(√acc + 1e-8)` with `g` including L2.
pub fn adagrad_update(
    param: &mut DenseMatrix,
    grad: &DenseMatrix,
    acc: &mut DenseMatrix,
    lr: f64,
    l2: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != acc.shape() {
        return Err(Error::Shape {
            op: "adagrad_update",
            left: param.shape(),
            right: grad.shape(),
        });
    }
    for ((w, g), a) in param.data_mut().iter_mut().zip(grad.data()).zip(acc.data_mut()) {
        let g = g + l2 * *w;
        *a += g * g;
        *w -= lr * g / (a.sqrt() + ADAGRAD_EPS);
    }
    Ok(())
}

/// Squared-gradient accumulators, one per trainable tensor.
#[derive(Debug, Clone)]
pub struct AdagradState {
    dense: Vec<DenseMatrix>,
    lookup: DenseMatrix,
    w_b: Option<DenseMatrix>,
}

impl AdagradState {
    pub fn new(model: &Model) -> Self {
        let zeros_like = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            dense: model.dense_params().iter().map(|(_, m)| zeros_like(m)).collect(),
            lookup: zeros_like(model.embedding().lookup_table()),
            w_b: model.embedding().projection().map(zeros_like),
        }
    }
}

pub fn adagrad_step(
    model: &mut Model,
    grads: &Gradients,
    lr: f64,
    l2_weight: f64,
    state: &mut AdagradState,
) -> Result<()> {
    let params = model.dense_params_mut();
    if params.len() != grads.dense.len() || params.len() != state.dense.len() {
        return Err(Error::invalid("gradient count does not match model"));
    }
    for ((w, g), a) in params.into_iter().zip(&grads.dense).zip(&mut state.dense) {
        adagrad_update(w, g, a, lr, l2_weight)?;
    }
    let (table, rows, w_b) = match (model.embedding_mut(), &grads.embedding) {
        (EmbeddingLayer::Plain(t), EmbeddingGrad::Plain(g)) => (t.weights_mut(), g, None),
        (EmbeddingLayer::Factorized(f), EmbeddingGrad::Factorized { w_a, w_b }) => {
            (&mut f.w_a, w_a, Some((&mut f.w_b, w_b)))
        }
        _ => return Err(Error::invalid("gradient/model embedding kind mismatch")),
    };
    if table.shape() != state.lookup.shape() {
        return Err(Error::invalid("adagrad state does not match model"));
    }
    for (&r, g) in &rows.rows {
        let acc = state.lookup.row_mut(r);
        for ((w, gv), a) in table.row_mut(r).iter_mut().zip(g).zip(acc) {
            let gv = gv + l2_weight * *w;
            *a += gv * gv;
            *w -= lr * gv / (a.sqrt() + ADAGRAD_EPS);
        }
    }
    if let Some((w, g)) = w_b {
        let acc = state
            .w_b
            .as_mut()
            .ok_or_else(|| Error::invalid("adagrad state does not match model"))?;
        adagrad_update(w, g, acc, lr, l2_weight)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub batch_index: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Set on the last batch of each epoch.
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub records: Vec<BatchRecord>,
}

impl MetricsLog {
    pub fn dev_accuracies(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.dev_accuracy).collect()
    }

    /// `batch_index,epoch,lr,train_loss,dev_accuracy` with a blank dev
    /// column between evaluations.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch_index,epoch,lr,train_loss,dev_accuracy\n");
        for r in &self.records {
            let dev = r.dev_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:e},{:.9},{}", r.batch_index, r.epoch, r.lr, r.train_loss, dev);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best dev accuracy (earliest on ties).
    pub model: Model,
    pub log: MetricsLog,
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
}

/// Dropout-mask generator seed derived from the training seed.
fn dropout_seed(seed: u64) -> u64 {
    seed ^ 0x6d61_736b_5f72_6e67
}

/// Mini-batch training with the configured schedule, keeping the snapshot
/// with the best dev accuracy.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    dev_set: &Dataset,
    cfg: &TrainConfig,
    calr: &CalrConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.schedule {
        Schedule::Calr => calr.validate()?,
        _ => {
            if !(calr.lr_ub_init > 0.0) {
                return Err(Error::Config("lr_ub_init must be positive".into()));
            }
        }
    }
    let vocab = model.embedding().vocab_size();
    train_set.check_vocab(vocab)?;
    dev_set.check_vocab(vocab)?;
    if train_set.num_classes > model.num_classes() {
        return Err(Error::invalid(format!(
            "training data has {} classes, model has {}",
            train_set.num_classes,
            model.num_classes()
        )));
    }

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let step_size = calr.resolved_step_size(batches_per_epoch);
    let mut state = CalrState::new(calr);
    let mut adagrad = (cfg.schedule == Schedule::Adagrad).then(|| AdagradState::new(&model));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(dropout_seed(cfg.seed));

    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        if cfg.schedule == Schedule::Calr {
            state = calr_epoch_update(state, calr);
        }
        for idx in batches(train_set, cfg.batch_size, cfg.seed, epoch as u64) {
            let lr = match cfg.schedule {
                Schedule::Calr => state.lr(calr, step_size),
                Schedule::Clr => clr(state.iteration, step_size, calr.lr_lb, calr.lr_ub_init),
                Schedule::Constant | Schedule::Adagrad => calr.lr_ub_init,
            };
            let batch: Vec<&Sentence> = idx.iter().map(|&i| &train_set.sentences[i]).collect();
            let dropout = Dropout {
                rate: cfg.dropout,
                rng: &mut mask_rng,
            };
            let trace = model.forward_batch(&batch, Some(dropout))?;
            let loss = trace.mean_loss();
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = model.backward(&trace)?;
            match adagrad.as_mut() {
                Some(acc) => adagrad_step(&mut model, &grads, lr, cfg.l2_weight, acc)?,
                None => sgd_step(&mut model, &grads, lr, cfg.l2_weight)?,
            }
            log.records.push(BatchRecord {
                batch_index: state.iteration,
                epoch,
                lr,
                train_loss: loss,
                dev_accuracy: None,
            });
            state.iteration += 1;
        }
        let acc = model.accuracy(dev_set)?;
        if let Some(last) = log.records.last_mut() {
            last.dev_accuracy = Some(acc);
        }
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.clone()));
        }
    }
    let (best_dev_accuracy, best_epoch, model) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model,
        log,
        best_dev_accuracy,
        best_epoch,
    })
}
