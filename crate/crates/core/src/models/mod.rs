//! Sentence classifiers: a deep averaging network and a single-layer LSTM.
//!
//! Both models read tokens through an [`EmbeddingLayer`] that is either a
//! plain table or a factor pair `(W_a, W_b)`. In the factorized case `W_b`
//! acts as a bias-free linear layer applied right after the lookup into
//! `W_a`. Forward passes record a [`ForwardTrace`] and [`Model::backward`]
//! turns it into exact gradients of the mean cross-entropy over the batch.

mod dan;
mod lstm;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use dan::{DanConfig, DanModel, DanTrace};
pub use lstm::{LstmModel, LstmTrace, DEFAULT_LSTM_HIDDEN};

use crate::data::{Dataset, Sentence};
use crate::embedding::{CompressionPlan, EmbeddingTable, FactorizedEmbedding};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Probability floor applied before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingLayer {
    Plain(EmbeddingTable),
    Factorized(FactorizedEmbedding),
}

impl EmbeddingLayer {
    pub fn vocab_size(&self) -> usize {
        match self {
            EmbeddingLayer::Plain(t) => t.vocab_size(),
            EmbeddingLayer::Factorized(f) => f.vocab_size(),
        }
    }

    /// Width of a row fetched by lookup (`dim`, or `k` when factorized).
    pub fn lookup_width(&self) -> usize {
        match self {
            EmbeddingLayer::Plain(t) => t.dim(),
            EmbeddingLayer::Factorized(f) => f.k(),
        }
    }

    /// Width fed to the rest of the network.
    pub fn output_width(&self) -> usize {
        match self {
            EmbeddingLayer::Plain(t) => t.dim(),
            EmbeddingLayer::Factorized(f) => f.dim(),
        }
    }

    /// The matrix rows are looked up in.
    pub fn lookup_table(&self) -> &DenseMatrix {
        match self {
            EmbeddingLayer::Plain(t) => t.weights(),
            EmbeddingLayer::Factorized(f) => &f.w_a,
        }
    }

    pub fn projection(&self) -> Option<&DenseMatrix> {
        match self {
            EmbeddingLayer::Plain(_) => None,
            EmbeddingLayer::Factorized(f) => Some(&f.w_b),
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, EmbeddingLayer::Factorized(_))
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            EmbeddingLayer::Plain(t) => t.weights().len(),
            EmbeddingLayer::Factorized(f) => f.parameter_count(),
        }
    }

    /// Full embedding of `token` (through `W_b` when factorized).
    pub fn embed(&self, token: usize) -> Result<Vec<f64>> {
        match self {
            EmbeddingLayer::Plain(t) => Ok(t.lookup(token)?.to_vec()),
            EmbeddingLayer::Factorized(f) => f.lookup(token),
        }
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(())
    }
}

/// `y = x · weight + bias` with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl Linear {
    /// Uniform `±√(6 / (fan_in + fan_out))` weights and zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, fan_in, fan_out, rng),
            bias: DenseMatrix::zeros(1, fan_out),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

pub(crate) fn glorot_uniform(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..=limit))
}

/// Train-mode dropout: drop rate plus the generator that draws masks.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    /// Inverted-dropout mask: `0` with probability `rate`, else `1/(1-rate)`.
    /// `None` when the rate is zero.
    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Option<DenseMatrix> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        Some(DenseMatrix::from_fn(rows, cols, |_, _| {
            if self.rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// Softmax of one row of logits, shifted by the max for stability.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln p[label]` with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Logits and class probabilities for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum ForwardTrace {
    Dan(DanTrace),
    Lstm(LstmTrace),
}

impl ForwardTrace {
    pub fn outputs(&self) -> Vec<Output> {
        match self {
            ForwardTrace::Dan(t) => t.outputs(),
            ForwardTrace::Lstm(t) => t.outputs(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            ForwardTrace::Dan(t) => &t.labels,
            ForwardTrace::Lstm(t) => &t.labels,
        }
    }

    /// Mean cross-entropy over the traced batch.
    pub fn mean_loss(&self) -> f64 {
        let outs = self.outputs();
        let total: f64 = outs
            .iter()
            .zip(self.labels())
            .map(|(o, &l)| cross_entropy(&o.probabilities, l))
            .sum();
        total / outs.len() as f64
    }
}

/// Gradient rows for the touched entries of a lookup table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrad {
    pub width: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGrad {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub(crate) fn add(&mut self, row: usize, alpha: f64, values: &[f64]) {
        let width = self.width;
        let r = self.rows.entry(row).or_insert_with(|| vec![0.0; width]);
        crate::linalg::axpy_slice(alpha, values, r);
    }

    /// Zero for untouched rows.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows.get(&row).map_or(0.0, |r| r[col])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingGrad {
    Plain(RowGrad),
    Factorized { w_a: RowGrad, w_b: DenseMatrix },
}

impl EmbeddingGrad {
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        match self {
            EmbeddingGrad::Plain(g) => g.rows.keys().copied(),
            EmbeddingGrad::Factorized { w_a, .. } => w_a.rows.keys().copied(),
        }
    }
}

/// Gradients for every trainable tensor. `dense` follows the order of
/// [`Model::dense_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: EmbeddingGrad,
    pub dense: Vec<DenseMatrix>,
}

impl Gradients {
    /// Adds the gradient of `½·l2·‖w‖²` for dense tensors, `W_b`, and the
    /// touched lookup rows (untouched rows are not decayed).
    pub fn add_l2(&mut self, model: &Model, l2: f64) -> Result<()> {
        if l2 == 0.0 {
            return Ok(());
        }
        for (g, (_, w)) in self.dense.iter_mut().zip(model.dense_params()) {
            g.axpy(l2, w)?;
        }
        let table = model.embedding().lookup_table();
        match (&mut self.embedding, model.embedding()) {
            (EmbeddingGrad::Plain(g), EmbeddingLayer::Plain(_)) => {
                for (&r, row) in g.rows.iter_mut() {
                    crate::linalg::axpy_slice(l2, table.row(r), row);
                }
            }
            (EmbeddingGrad::Factorized { w_a, w_b }, EmbeddingLayer::Factorized(f)) => {
                for (&r, row) in w_a.rows.iter_mut() {
                    crate::linalg::axpy_slice(l2, table.row(r), row);
                }
                w_b.axpy(l2, &f.w_b)?;
            }
            _ => return Err(Error::invalid("gradient/model embedding kind mismatch")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dan,
    Lstm,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Dan => 0,
            ModelKind::Lstm => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelKind::Dan),
            1 => Some(ModelKind::Lstm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dan(DanModel),
    Lstm(LstmModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Dan(_) => ModelKind::Dan,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn embedding(&self) -> &EmbeddingLayer {
        match self {
            Model::Dan(m) => &m.embedding,
            Model::Lstm(m) => &m.embedding,
        }
    }

    pub fn embedding_mut(&mut self) -> &mut EmbeddingLayer {
        match self {
            Model::Dan(m) => &mut m.embedding,
            Model::Lstm(m) => &mut m.embedding,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Dan(m) => m.out.out_width(),
            Model::Lstm(m) => m.out.out_width(),
        }
    }

    /// Every trainable tensor except the embedding layer, in a fixed order.
    pub fn dense_params(&self) -> Vec<(&'static str, &DenseMatrix)> {
        match self {
            Model::Dan(m) => m.dense_params(),
            Model::Lstm(m) => m.dense_params(),
        }
    }

    pub fn dense_params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            Model::Dan(m) => m.dense_params_mut(),
            Model::Lstm(m) => m.dense_params_mut(),
        }
    }

    /// Named tensors for serialization: embedding tensors first.
    pub fn named_tensors(&self) -> Vec<(&'static str, &DenseMatrix)> {
        let mut out: Vec<(&'static str, &DenseMatrix)> = match self.embedding() {
            EmbeddingLayer::Plain(t) => vec![("embedding", t.weights())],
            EmbeddingLayer::Factorized(f) => vec![("embedding.w_a", &f.w_a), ("embedding.w_b", &f.w_b)],
        };
        out.extend(self.dense_params());
        out
    }

    /// Rebuilds a model from [`Model::named_tensors`] output.
    pub fn from_named_tensors(kind: ModelKind, tensors: Vec<(String, DenseMatrix)>) -> Result<Model> {
        let mut map: BTreeMap<String, DenseMatrix> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
        }
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
        };
        let embedding = if let Ok(w) = take("embedding") {
            EmbeddingLayer::Plain(EmbeddingTable::new(w))
        } else {
            let w_a = take("embedding.w_a")?;
            let w_b = take("embedding.w_b")?;
            EmbeddingLayer::Factorized(FactorizedEmbedding::new(w_a, w_b)?)
        };
        let model = match kind {
            ModelKind::Dan => Model::Dan(DanModel::from_parts(
                embedding,
                Linear {
                    weight: take("fc1.w")?,
                    bias: take("fc1.b")?,
                },
                Linear {
                    weight: take("fc2.w")?,
                    bias: take("fc2.b")?,
                },
                Linear {
                    weight: take("out.w")?,
                    bias: take("out.b")?,
                },
            )?),
            ModelKind::Lstm => Model::Lstm(LstmModel::from_parts(
                embedding,
                take("lstm.w_x")?,
                take("lstm.w_h")?,
                take("lstm.b")?,
                Linear {
                    weight: take("out.w")?,
                    bias: take("out.b")?,
                },
            )?),
        };
        if let Some(name) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name:?}")));
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Forward pass over a batch; `dropout` = `None` is eval mode.
    pub fn forward_batch(&self, batch: &[&Sentence], dropout: Option<Dropout<'_>>) -> Result<ForwardTrace> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        match self {
            Model::Dan(m) => Ok(ForwardTrace::Dan(m.forward_batch(batch, dropout)?)),
            Model::Lstm(m) => Ok(ForwardTrace::Lstm(m.forward_batch(batch, dropout)?)),
        }
    }

    /// Eval-mode forward of one sentence.
    pub fn forward(&self, s: &Sentence) -> Result<Output> {
        let trace = self.forward_batch(&[s], None)?;
        Ok(trace.outputs().remove(0))
    }

    pub fn backward(&self, trace: &ForwardTrace) -> Result<Gradients> {
        match (self, trace) {
            (Model::Dan(m), ForwardTrace::Dan(t)) => m.backward(t),
            (Model::Lstm(m), ForwardTrace::Lstm(t)) => m.backward(t),
            _ => Err(Error::invalid("trace does not belong to this model kind")),
        }
    }

    pub fn predict(&self, s: &Sentence) -> Result<usize> {
        Ok(argmax(&self.forward(s)?.probabilities))
    }

    /// Eval-mode predictions for a whole dataset.
    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<usize>> {
        let refs: Vec<&Sentence> = data.sentences.iter().collect();
        let mut out = Vec::with_capacity(refs.len());
        for chunk in refs.chunks(256) {
            let trace = self.forward_batch(chunk, None)?;
            out.extend(trace.outputs().iter().map(|o| argmax(&o.probabilities)));
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let preds = self.predict_all(data)?;
        let correct = preds
            .iter()
            .zip(&data.sentences)
            .filter(|(p, s)| **p == s.label)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Replaces a plain embedding by its rank-`k` factorization for `p`.
    pub fn factorize_embedding(&mut self, p: f64) -> Result<CompressionPlan> {
        let EmbeddingLayer::Plain(table) = self.embedding() else {
            return Err(Error::invalid("embedding is already factorized"));
        };
        let (f, plan) = crate::embedding::factorize(table, p)?;
        *self.embedding_mut() = EmbeddingLayer::Factorized(f);
        Ok(plan)
    }

    /// As [`Model::factorize_embedding`] at an explicit rank.
    pub fn factorize_embedding_rank(&mut self, k: usize) -> Result<()> {
        let EmbeddingLayer::Plain(table) = self.embedding() else {
            return Err(Error::invalid("embedding is already factorized"));
        };
        let f = crate::embedding::factorize_with_rank(table, k)?;
        *self.embedding_mut() = EmbeddingLayer::Factorized(f);
        Ok(())
    }
}
