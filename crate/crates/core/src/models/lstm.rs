use rand_chacha::ChaCha8Rng;

use super::{
    glorot_uniform, softmax, Dropout, EmbeddingGrad, EmbeddingLayer, Gradients, Linear, Output,
    RowGrad,
};
use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::linalg::{axpy_slice, dot, vec_mat, DenseMatrix};

pub const DEFAULT_LSTM_HIDDEN: usize = 168;

/// Single-layer unidirectional LSTM; the final hidden state feeds the
/// softmax head.
///
/// Gate pre-activations are packed `[input | forget | output | candidate]`
/// in `w_x` (in × 4H), `w_h` (H × 4H) and `b` (1 × 4H).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub embedding: EmbeddingLayer,
    pub w_x: DenseMatrix,
    pub w_h: DenseMatrix,
    pub b: DenseMatrix,
    pub out: Linear,
}

#[derive(Debug, Clone)]
struct SentenceTrace {
    tokens: Vec<usize>,
    /// Lookup rows (T × lookup width); only kept when factorized.
    lookups: Vec<Vec<f64>>,
    /// Inputs to the recurrence (T × in).
    xs: Vec<Vec<f64>>,
    /// Post-activation gates per step (T × 4H).
    gates: Vec<Vec<f64>>,
    /// c_0..c_T and h_0..h_T.
    cs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    mask: Option<Vec<f64>>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub(crate) labels: Vec<usize>,
    steps: Vec<SentenceTrace>,
}

impl LstmTrace {
    pub fn outputs(&self) -> Vec<Output> {
        self.steps
            .iter()
            .map(|s| Output {
                logits: s.logits.clone(),
                probabilities: s.probs.clone(),
            })
            .collect()
    }

    /// Final hidden state of sentence `i` (before dropout).
    pub fn final_hidden(&self, i: usize) -> &[f64] {
        self.steps[i].hs.last().expect("h_0 is always present")
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmModel {
    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn new(
        embedding: EmbeddingLayer,
        num_classes: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        if hidden == 0 {
            return Err(Error::invalid("LSTM hidden width must be positive"));
        }
        let input = embedding.output_width();
        let w_x = glorot_uniform(input, 4 * hidden, input, hidden, rng);
        let w_h = glorot_uniform(hidden, 4 * hidden, hidden, hidden, rng);
        let mut b = DenseMatrix::zeros(1, 4 * hidden);
        b.row_mut(0)[hidden..2 * hidden].fill(1.0);
        Ok(Self {
            embedding,
            w_x,
            w_h,
            b,
            out: Linear::glorot(hidden, num_classes, rng),
        })
    }

    pub fn from_parts(
        embedding: EmbeddingLayer,
        w_x: DenseMatrix,
        w_h: DenseMatrix,
        b: DenseMatrix,
        out: Linear,
    ) -> Result<Self> {
        let h = w_h.rows();
        let ok = w_x.rows() == embedding.output_width()
            && w_x.cols() == 4 * h
            && w_h.cols() == 4 * h
            && b.shape() == (1, 4 * h)
            && out.in_width() == h
            && out.bias.shape() == (1, out.out_width());
        if !ok {
            return Err(Error::Shape {
                op: "lstm parts",
                left: w_x.shape(),
                right: w_h.shape(),
            });
        }
        Ok(Self {
            embedding,
            w_x,
            w_h,
            b,
            out,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub(crate) fn dense_params(&self) -> Vec<(&'static str, &DenseMatrix)> {
        vec![
            ("lstm.w_x", &self.w_x),
            ("lstm.w_h", &self.w_h),
            ("lstm.b", &self.b),
            ("out.w", &self.out.weight),
            ("out.b", &self.out.bias),
        ]
    }

    pub(crate) fn dense_params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![
            &mut self.w_x,
            &mut self.w_h,
            &mut self.b,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    fn forward_one(&self, s: &Sentence, dropout: &mut Option<Dropout<'_>>) -> Result<SentenceTrace> {
        if s.token_ids.is_empty() {
            return Err(Error::invalid("sentence with no tokens"));
        }
        let h = self.hidden();
        let table = self.embedding.lookup_table();
        let projection = self.embedding.projection();

        let mut lookups = Vec::new();
        let mut xs = Vec::with_capacity(s.len());
        for &t in &s.token_ids {
            self.embedding.check_token(t)?;
            let row = table.row(t);
            match projection {
                Some(w_b) => {
                    let mut x = vec![0.0; w_b.cols()];
                    vec_mat(row, w_b, &mut x);
                    lookups.push(row.to_vec());
                    xs.push(x);
                }
                None => xs.push(row.to_vec()),
            }
        }

        let mut cs = vec![vec![0.0; h]];
        let mut hs = vec![vec![0.0; h]];
        let mut gates = Vec::with_capacity(xs.len());
        for x in &xs {
            let mut z = self.b.row(0).to_vec();
            vec_mat(x, &self.w_x, &mut z);
            vec_mat(hs.last().unwrap(), &self.w_h, &mut z);
            for v in &mut z[..3 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut z[3 * h..] {
                *v = v.tanh();
            }
            let c_prev = cs.last().unwrap();
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for j in 0..h {
                let (i_g, f_g, o_g, g_g) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
                c[j] = f_g * c_prev[j] + i_g * g_g;
                hn[j] = o_g * c[j].tanh();
            }
            gates.push(z);
            cs.push(c);
            hs.push(hn);
        }

        let mask = dropout.as_mut().and_then(|d| d.mask(1, h)).map(DenseMatrix::into_data);
        let mut rep = hs.last().unwrap().clone();
        if let Some(m) = &mask {
            rep.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let mut logits = self.out.bias.row(0).to_vec();
        vec_mat(&rep, &self.out.weight, &mut logits);
        let probs = softmax(&logits);
        if probs.iter().chain(&logits).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lstm forward"));
        }
        Ok(SentenceTrace {
            tokens: s.token_ids.clone(),
            lookups,
            xs,
            gates,
            cs,
            hs,
            mask,
            logits,
            probs,
        })
    }

    pub fn forward_batch(&self, batch: &[&Sentence], mut dropout: Option<Dropout<'_>>) -> Result<LstmTrace> {
        let steps = batch
            .iter()
            .map(|s| self.forward_one(s, &mut dropout))
            .collect::<Result<Vec<_>>>()?;
        Ok(LstmTrace {
            labels: batch.iter().map(|s| s.label).collect(),
            steps,
        })
    }

    /// Backpropagation through time, averaged over the batch.
    pub fn backward(&self, t: &LstmTrace) -> Result<Gradients> {
        let h = self.hidden();
        let classes = self.out.out_width();
        let input = self.w_x.rows();
        let inv_b = 1.0 / t.steps.len() as f64;

        let mut g_wx = DenseMatrix::zeros(input, 4 * h);
        let mut g_wh = DenseMatrix::zeros(h, 4 * h);
        let mut g_b = DenseMatrix::zeros(1, 4 * h);
        let mut g_out_w = DenseMatrix::zeros(h, classes);
        let mut g_out_b = DenseMatrix::zeros(1, classes);
        let mut rows = RowGrad::new(self.embedding.lookup_width());
        let mut g_wb = self.embedding.projection().map(|w| DenseMatrix::zeros(w.rows(), w.cols()));

        for (st, &label) in t.steps.iter().zip(&t.labels) {
            if st.probs.len() != classes || st.gates.first().map(Vec::len) != Some(4 * h) {
                return Err(Error::invalid("trace does not match model shapes"));
            }
            if label >= classes {
                return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
            }
            let mut dlogits = st.probs.clone();
            dlogits[label] -= 1.0;
            dlogits.iter_mut().for_each(|v| *v *= inv_b);

            let mut rep = st.hs.last().unwrap().clone();
            if let Some(m) = &st.mask {
                rep.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            for (j, &r) in rep.iter().enumerate() {
                axpy_slice(r, &dlogits, g_out_w.row_mut(j));
            }
            axpy_slice(1.0, &dlogits, g_out_b.row_mut(0));

            let mut dh: Vec<f64> = (0..h).map(|j| dot(self.out.weight.row(j), &dlogits)).collect();
            if let Some(m) = &st.mask {
                dh.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            let mut dc_next = vec![0.0; h];
            let mut dz = vec![0.0; 4 * h];

            for step in (0..st.xs.len()).rev() {
                let z = &st.gates[step];
                let c = &st.cs[step + 1];
                let c_prev = &st.cs[step];
                let h_prev = &st.hs[step];
                for j in 0..h {
                    let (i_g, f_g, o_g, g_g) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
                    let tc = c[j].tanh();
                    let d_o = dh[j] * tc;
                    let dc = dc_next[j] + dh[j] * o_g * (1.0 - tc * tc);
                    dz[j] = dc * g_g * i_g * (1.0 - i_g);
                    dz[h + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
                    dz[2 * h + j] = d_o * o_g * (1.0 - o_g);
                    dz[3 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                    dc_next[j] = dc * f_g;
                }
                let x = &st.xs[step];
                for (k, &xk) in x.iter().enumerate() {
                    if xk != 0.0 {
                        axpy_slice(xk, &dz, g_wx.row_mut(k));
                    }
                }
                for (k, &hk) in h_prev.iter().enumerate() {
                    if hk != 0.0 {
                        axpy_slice(hk, &dz, g_wh.row_mut(k));
                    }
                }
                axpy_slice(1.0, &dz, g_b.row_mut(0));

                let dx: Vec<f64> = (0..input).map(|k| dot(self.w_x.row(k), &dz)).collect();
                for (j, v) in dh.iter_mut().enumerate() {
                    *v = dot(self.w_h.row(j), &dz);
                }

                let tok = st.tokens[step];
                match (self.embedding.projection(), g_wb.as_mut()) {
                    (Some(w_b), Some(gwb)) => {
                        let lookup = &st.lookups[step];
                        for (r, &a) in lookup.iter().enumerate() {
                            if a != 0.0 {
                                axpy_slice(a, &dx, gwb.row_mut(r));
                            }
                        }
                        let da: Vec<f64> = (0..w_b.rows()).map(|r| dot(w_b.row(r), &dx)).collect();
                        rows.add(tok, 1.0, &da);
                    }
                    _ => rows.add(tok, 1.0, &dx),
                }
            }
        }

        let embedding = match g_wb {
            Some(w_b) => EmbeddingGrad::Factorized { w_a: rows, w_b },
            None => EmbeddingGrad::Plain(rows),
        };
        Ok(Gradients {
            embedding,
            dense: vec![g_wx, g_wh, g_b, g_out_w, g_out_b],
        })
    }
}
