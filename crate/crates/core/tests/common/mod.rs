#![allow(dead_code)]

use std::collections::BTreeSet;

use embsqueeze::data::Sentence;
use embsqueeze::embedding::EmbeddingTable;
use embsqueeze::linalg::DenseMatrix;
use embsqueeze::models::{DanConfig, DanModel, EmbeddingGrad, EmbeddingLayer, LstmModel, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn toy_embedding(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingLayer {
    EmbeddingLayer::Plain(EmbeddingTable::new(random_matrix(vocab, dim, rng)))
}

pub fn toy_dan(seed: u64, hidden: [usize; 2]) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = toy_embedding(6, 4, &mut rng);
    let mut m = DanModel::new(emb, 3, &DanConfig { hidden }, &mut rng).unwrap();
    // nonzero biases so the check covers them away from a symmetric point
    for b in [&mut m.fc1.bias, &mut m.fc2.bias, &mut m.out.bias] {
        *b = random_matrix(1, b.cols(), &mut rng);
        b.scale(0.1);
    }
    Model::Dan(m)
}

pub fn toy_lstm(seed: u64, hidden: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = toy_embedding(6, 4, &mut rng);
    Model::Lstm(LstmModel::new(emb, 3, hidden, &mut rng).unwrap())
}

pub fn toy_batch(seed: u64, n: usize, vocab: usize, classes: usize, max_t: usize) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = rng.gen_range(1..=max_t);
            let ids = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
            Sentence::new(ids, rng.gen_range(0..classes))
        })
        .collect()
}

/// Mean cross-entropy plus `½·l2·‖w‖²` over dense tensors, `W_b`, and the
/// lookup rows the batch touches.
fn objective(model: &Model, batch: &[&Sentence], l2: f64, touched: &BTreeSet<usize>) -> f64 {
    let ce = model.forward_batch(batch, None).unwrap().mean_loss();
    let mut sq = 0.0;
    for (name, t) in model.named_tensors() {
        if name == "embedding" || name == "embedding.w_a" {
            for &r in touched {
                sq += t.row(r).iter().map(|v| v * v).sum::<f64>();
            }
        } else {
            sq += t.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    ce + 0.5 * l2 * sq
}

fn with_entry(model: &Model, tensor: usize, idx: usize, delta: f64) -> Model {
    let mut tensors: Vec<(String, DenseMatrix)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    tensors[tensor].1.data_mut()[idx] += delta;
    Model::from_named_tensors(model.kind(), tensors).unwrap()
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central differences (step `eps`) on every parameter entry against
/// `backward` + `add_l2`. The relative error uses `max(|a|, |n|, 1e-5)` as
/// its denominator; below that, round-off in the difference quotient
/// (about 1e-16 / eps) is what gets measured. `per_tensor` limits the check
/// to that many randomly chosen entries of each tensor.
pub fn finite_difference_check(
    model: &Model,
    batch: &[Sentence],
    l2: f64,
    eps: f64,
    per_tensor: Option<usize>,
) -> GradCheck {
    let refs: Vec<&Sentence> = batch.iter().collect();
    let trace = model.forward_batch(&refs, None).unwrap();
    let mut grads = model.backward(&trace).unwrap();
    grads.add_l2(model, l2).unwrap();
    let touched: BTreeSet<usize> = grads.embedding.touched_rows().collect();

    let names: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    let n_emb = names.iter().filter(|n| n.starts_with("embedding")).count();
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (ti, name) in names.iter().enumerate() {
        let shape = model.named_tensors()[ti].1.shape();
        let total = shape.0 * shape.1;
        let indices: Vec<usize> = match per_tensor {
            None => (0..total).collect(),
            Some(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(ti as u64);
                (0..n.min(total)).map(|_| rng.gen_range(0..total)).collect()
            }
        };
        for idx in indices {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let analytic = match (name.as_str(), &grads.embedding) {
                ("embedding", EmbeddingGrad::Plain(g)) => g.get(r, c),
                ("embedding.w_a", EmbeddingGrad::Factorized { w_a, .. }) => w_a.get(r, c),
                ("embedding.w_b", EmbeddingGrad::Factorized { w_b, .. }) => w_b.get(r, c),
                _ => grads.dense[ti - n_emb].get(r, c),
            };
            let plus = objective(&with_entry(model, ti, idx, eps), &refs, l2, &touched);
            let minus = objective(&with_entry(model, ti, idx, -eps), &refs, l2, &touched);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{r},{c}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    report
}
