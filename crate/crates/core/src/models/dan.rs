use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    softmax, Dropout, EmbeddingGrad, EmbeddingLayer, Gradients, Linear, Output, RowGrad,
};
use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DanConfig {
    /// Widths of the two ReLU layers after averaging.
    pub hidden: [usize; 2],
}

impl Default for DanConfig {
    fn default() -> Self {
        Self { hidden: [1024, 512] }
    }
}

/// Mean of token embeddings → ReLU(1024) → ReLU(512) → softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DanModel {
    pub embedding: EmbeddingLayer,
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

/// Activations of a batched DAN forward pass.
#[derive(Debug, Clone)]
pub struct DanTrace {
    pub(crate) tokens: Vec<Vec<usize>>,
    pub(crate) labels: Vec<usize>,
    /// Mean of looked-up rows (B × lookup width).
    avg: DenseMatrix,
    /// Input to fc1 (`avg · W_b` when factorized, else `avg`).
    rep: DenseMatrix,
    z1: DenseMatrix,
    h1: DenseMatrix,
    mask1: Option<DenseMatrix>,
    z2: DenseMatrix,
    h2: DenseMatrix,
    mask2: Option<DenseMatrix>,
    logits: DenseMatrix,
    probs: DenseMatrix,
}

impl DanTrace {
    pub fn outputs(&self) -> Vec<Output> {
        (0..self.logits.rows())
            .map(|i| Output {
                logits: self.logits.row(i).to_vec(),
                probabilities: self.probs.row(i).to_vec(),
            })
            .collect()
    }

    /// Sentence representation fed to the first dense layer.
    pub fn representation(&self) -> &DenseMatrix {
        &self.rep
    }
}

fn relu_inplace(m: &mut DenseMatrix) {
    m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn apply_mask(m: &mut DenseMatrix, mask: &Option<DenseMatrix>) {
    if let Some(mask) = mask {
        for (v, k) in m.data_mut().iter_mut().zip(mask.data()) {
            *v *= k;
        }
    }
}

/// `grad ⊙ mask ⊙ 1[z > 0]`.
fn relu_mask_backward(grad: &mut DenseMatrix, z: &DenseMatrix, mask: &Option<DenseMatrix>) {
    apply_mask(grad, mask);
    for (g, zv) in grad.data_mut().iter_mut().zip(z.data()) {
        if *zv <= 0.0 {
            *g = 0.0;
        }
    }
}

impl DanModel {
    pub fn new(
        embedding: EmbeddingLayer,
        num_classes: usize,
        cfg: &DanConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        let [h1, h2] = cfg.hidden;
        if h1 == 0 || h2 == 0 {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let width = embedding.output_width();
        Ok(Self {
            embedding,
            fc1: Linear::glorot(width, h1, rng),
            fc2: Linear::glorot(h1, h2, rng),
            out: Linear::glorot(h2, num_classes, rng),
        })
    }

    pub fn from_parts(embedding: EmbeddingLayer, fc1: Linear, fc2: Linear, out: Linear) -> Result<Self> {
        let chain = [
            ("embedding→fc1", embedding.output_width(), &fc1),
            ("fc1→fc2", fc1.out_width(), &fc2),
            ("fc2→out", fc2.out_width(), &out),
        ];
        for (op, width, layer) in chain {
            if layer.in_width() != width || layer.bias.shape() != (1, layer.out_width()) {
                return Err(Error::Shape {
                    op,
                    left: (1, width),
                    right: layer.weight.shape(),
                });
            }
        }
        Ok(Self {
            embedding,
            fc1,
            fc2,
            out,
        })
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.fc1.out_width(), self.fc2.out_width()]
    }

    pub(crate) fn dense_params(&self) -> Vec<(&'static str, &DenseMatrix)> {
        vec![
            ("fc1.w", &self.fc1.weight),
            ("fc1.b", &self.fc1.bias),
            ("fc2.w", &self.fc2.weight),
            ("fc2.b", &self.fc2.bias),
            ("out.w", &self.out.weight),
            ("out.b", &self.out.bias),
        ]
    }

    pub(crate) fn dense_params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    /// Per-sentence mean of lookup rows.
    fn average_lookup(&self, batch: &[&Sentence]) -> Result<DenseMatrix> {
        let table = self.embedding.lookup_table();
        let mut avg = DenseMatrix::zeros(batch.len(), table.cols());
        for (i, s) in batch.iter().enumerate() {
            if s.token_ids.is_empty() {
                return Err(Error::invalid("sentence with no tokens"));
            }
            let inv = 1.0 / s.token_ids.len() as f64;
            let row = avg.row_mut(i);
            for &t in &s.token_ids {
                self.embedding.check_token(t)?;
                crate::linalg::axpy_slice(1.0, table.row(t), row);
            }
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(avg)
    }

    pub fn forward_batch(&self, batch: &[&Sentence], mut dropout: Option<Dropout<'_>>) -> Result<DanTrace> {
        let avg = self.average_lookup(batch)?;
        // Averaging commutes with W_b, so project the mean once per sentence.
        let rep = match self.embedding.projection() {
            Some(w_b) => matmul(&avg, w_b, None)?,
            None => avg.clone(),
        };

        let mut z1 = matmul(&rep, &self.fc1.weight, None)?;
        z1.add_row_broadcast(&self.fc1.bias)?;
        let mut h1 = z1.clone();
        relu_inplace(&mut h1);
        let mask1 = dropout.as_mut().and_then(|d| d.mask(h1.rows(), h1.cols()));
        apply_mask(&mut h1, &mask1);

        let mut z2 = matmul(&h1, &self.fc2.weight, None)?;
        z2.add_row_broadcast(&self.fc2.bias)?;
        let mut h2 = z2.clone();
        relu_inplace(&mut h2);
        let mask2 = dropout.as_mut().and_then(|d| d.mask(h2.rows(), h2.cols()));
        apply_mask(&mut h2, &mask2);

        let mut logits = matmul(&h2, &self.out.weight, None)?;
        logits.add_row_broadcast(&self.out.bias)?;
        let mut probs = logits.clone();
        for i in 0..probs.rows() {
            let p = softmax(logits.row(i));
            probs.row_mut(i).copy_from_slice(&p);
        }
        probs.ensure_finite("softmax")?;

        Ok(DanTrace {
            tokens: batch.iter().map(|s| s.token_ids.clone()).collect(),
            labels: batch.iter().map(|s| s.label).collect(),
            avg,
            rep,
            z1,
            h1,
            mask1,
            z2,
            h2,
            mask2,
            logits,
            probs,
        })
    }

    pub fn backward(&self, t: &DanTrace) -> Result<Gradients> {
        let b = t.labels.len();
        let classes = self.out.out_width();
        if t.probs.shape() != (b, classes) || t.rep.cols() != self.fc1.in_width() {
            return Err(Error::invalid("trace does not match model shapes"));
        }
        if let Some(&bad) = t.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }

        // d(mean CE)/d logits = (p - onehot) / B
        let mut dlogits = t.probs.clone();
        for (i, &l) in t.labels.iter().enumerate() {
            let v = dlogits.get(i, l);
            dlogits.set(i, l, v - 1.0);
        }
        dlogits.scale(1.0 / b as f64);

        let g_out_w = matmul_tn(&t.h2, &dlogits)?;
        let g_out_b = dlogits.column_sums();

        let mut dz2 = matmul_nt(&dlogits, &self.out.weight)?;
        relu_mask_backward(&mut dz2, &t.z2, &t.mask2);
        let g_fc2_w = matmul_tn(&t.h1, &dz2)?;
        let g_fc2_b = dz2.column_sums();

        let mut dz1 = matmul_nt(&dz2, &self.fc2.weight)?;
        relu_mask_backward(&mut dz1, &t.z1, &t.mask1);
        let g_fc1_w = matmul_tn(&t.rep, &dz1)?;
        let g_fc1_b = dz1.column_sums();

        let drep = matmul_nt(&dz1, &self.fc1.weight)?;
        let (davg, g_w_b) = match self.embedding.projection() {
            Some(w_b) => (matmul_nt(&drep, w_b)?, Some(matmul_tn(&t.avg, &drep)?)),
            None => (drep, None),
        };

        let mut rows = RowGrad::new(davg.cols());
        for (i, tokens) in t.tokens.iter().enumerate() {
            let inv = 1.0 / tokens.len() as f64;
            for &tok in tokens {
                rows.add(tok, inv, davg.row(i));
            }
        }
        let embedding = match g_w_b {
            Some(w_b) => EmbeddingGrad::Factorized { w_a: rows, w_b },
            None => EmbeddingGrad::Plain(rows),
        };
        Ok(Gradients {
            embedding,
            dense: vec![g_fc1_w, g_fc1_b, g_fc2_w, g_fc2_b, g_out_w, g_out_b],
        })
    }
}
