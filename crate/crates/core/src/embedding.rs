//! Embedding tables and their low-rank compression.
//!
//! Tables are stored `vocab_size × dim`, so a lookup is a row slice. A
//! trained table `W` (m × n) is compressed by truncated SVD into
//! `W_a = U_k` (m × k) and `W_b = Σ_k V_kᵀ` (k × n), with the rank chosen
//! from the retained-parameter fraction `p` as `k = ⌊p·m·n / (m + n)⌋`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::linalg::{matmul, svd, truncate_svd, DenseMatrix, SvdResult};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    weights: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(weights: DenseMatrix) -> Self {
        Self { weights }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn lookup(&self, token: usize) -> Result<&[f64]> {
        if token >= self.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(self.weights.row(token))
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weights
    }

    pub fn into_weights(self) -> DenseMatrix {
        self.weights
    }
}

/// `W ≈ W_a · W_b`; row `i` of the product is the embedding of token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedEmbedding {
    pub w_a: DenseMatrix,
    pub w_b: DenseMatrix,
}

impl FactorizedEmbedding {
    pub fn new(w_a: DenseMatrix, w_b: DenseMatrix) -> Result<Self> {
        if w_a.cols() != w_b.rows() {
            return Err(Error::Shape {
                op: "factorized embedding",
                left: w_a.shape(),
                right: w_b.shape(),
            });
        }
        Ok(Self { w_a, w_b })
    }

    pub fn k(&self) -> usize {
        self.w_a.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_a.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_b.cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.w_a.len() + self.w_b.len()
    }

    pub fn lookup(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: self.vocab_size(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        crate::linalg::vec_mat(self.w_a.row(token), &self.w_b, &mut out);
        Ok(out)
    }

    /// The dense `W_a · W_b`.
    pub fn to_dense(&self) -> Result<DenseMatrix> {
        matmul(&self.w_a, &self.w_b, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub m: usize,
    pub n: usize,
    /// Retained-parameter fraction.
    pub p: f64,
    /// Size-reduction fraction, `1 - p`.
    pub r_pct: f64,
    pub k: usize,
}

impl CompressionPlan {
    pub fn original_params(&self) -> usize {
        self.m * self.n
    }

    pub fn compressed_params(&self) -> usize {
        self.k * (self.m + self.n)
    }
}

/// Rank for retaining a fraction `p` of an `m × n` matrix's parameters,
/// clamped below at 1.
pub fn choose_rank(p: f64, m: usize, n: usize) -> Result<CompressionPlan> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("retention fraction p={p} outside (0, 1]")));
    }
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!("matrix dimensions {m}x{n} must be positive")));
    }
    let raw = (p * m as f64 * n as f64 / (m + n) as f64).floor() as usize;
    Ok(CompressionPlan {
        m,
        n,
        p,
        r_pct: 1.0 - p,
        k: raw.max(1),
    })
}

/// Splits a rank-`k` truncated SVD into `(U_k, Σ_k V_kᵀ)`.
fn split_factors(s: &SvdResult) -> Result<FactorizedEmbedding> {
    let mut w_b = s.vt.clone();
    for (i, sig) in s.sigma.iter().enumerate() {
        w_b.row_mut(i).iter_mut().for_each(|x| *x *= sig);
    }
    FactorizedEmbedding::new(s.u.clone(), w_b)
}

/// Factorizes at an explicit rank.
pub fn factorize_with_rank(table: &EmbeddingTable, k: usize) -> Result<FactorizedEmbedding> {
    let s = svd(table.weights())?;
    split_factors(&truncate_svd(&s, k)?)
}

/// Online compression: the trained table becomes `(W_a, W_b)` at the rank
/// chosen for `p`. Both factors stay trainable.
pub fn factorize(table: &EmbeddingTable, p: f64) -> Result<(FactorizedEmbedding, CompressionPlan)> {
    let plan = choose_rank(p, table.vocab_size(), table.dim())?;
    let f = factorize_with_rank(table, plan.k)?;
    Ok((f, plan))
}

/// Offline compression: projects the table onto its top-`k` right singular
/// directions, giving a `vocab_size × k` table `U_k Σ_k`. A model built on
/// it has no `W_b` layer.
pub fn offline_compress(table: &EmbeddingTable, p: f64) -> Result<(EmbeddingTable, CompressionPlan)> {
    let plan = choose_rank(p, table.vocab_size(), table.dim())?;
    Ok((offline_compress_rank(table, plan.k)?, plan))
}

/// As [`offline_compress`] at an explicit rank.
pub fn offline_compress_rank(table: &EmbeddingTable, k: usize) -> Result<EmbeddingTable> {
    let s = truncate_svd(&svd(table.weights())?, k)?;
    let mut us = s.u;
    for i in 0..us.rows() {
        for (x, sig) in us.row_mut(i).iter_mut().zip(&s.sigma) {
            *x *= sig;
        }
    }
    Ok(EmbeddingTable::new(us))
}

/// Half-width of the uniform init law for a table of width `dim`.
pub fn init_bound(dim: usize) -> f64 {
    0.5 / dim as f64
}

/// Entries uniform in `[-0.5/dim, 0.5/dim]`, deterministic per seed.
pub fn random_init(vocab_size: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = init_bound(dim);
    EmbeddingTable::new(DenseMatrix::from_fn(vocab_size, dim, |_, _| {
        rng.gen_range(-b..=b)
    }))
}

/// Stand-in for pretrained vectors on a class-partitioned corpus.
///
/// Every row is isotropic Gaussian noise with standard deviation `noise`;
/// rows of tokens owned by class `c` additionally get `signal · u_c` for a
/// random unit direction `u_c`. With `signal` small next to
/// `noise · sqrt(vocab_size / owned)`, the class directions sit below the
/// leading noise singular values, so class information is spread over the
/// spectrum much like it is in real word vectors.
pub fn synthetic_pretrained(
    vocab_size: usize,
    dim: usize,
    class_tokens: &[Vec<usize>],
    signal: f64,
    noise: f64,
    seed: u64,
) -> Result<EmbeddingTable> {
    if vocab_size == 0 || dim == 0 {
        return Err(Error::invalid("embedding shape must be positive"));
    }
    if !(signal >= 0.0 && noise >= 0.0 && signal.is_finite() && noise.is_finite()) {
        return Err(Error::invalid("signal and noise must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut owner = vec![None; vocab_size];
    let mut directions = Vec::with_capacity(class_tokens.len());
    for (c, tokens) in class_tokens.iter().enumerate() {
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        directions.push(u);
        for &t in tokens {
            let slot = owner
                .get_mut(t)
                .ok_or(Error::TokenOutOfRange { id: t, vocab_size })?;
            *slot = Some(c);
        }
    }
    let table = DenseMatrix::from_fn(vocab_size, dim, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        noise * z + owner[i].map_or(0.0, |c| signal * directions[c][j])
    });
    Ok(EmbeddingTable::new(table))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GloveCoverage {
    pub found: usize,
    pub vocab_size: usize,
}

impl GloveCoverage {
    pub fn fraction(&self) -> f64 {
        self.found as f64 / self.vocab_size as f64
    }
}

/// Reads a GloVe-style text file (`token v1 ... vd`, no header).
///
/// Rows for vocabulary tokens come from the file; all other rows keep the
/// [`random_init`] draw for `seed`. The width `d` is taken from the first
/// line and every later line must match it.
pub fn load_glove_text(
    path: &Path,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(EmbeddingTable, GloveCoverage)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let name = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };

    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line_no, format!("unreadable value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(parse_err(line_no, "vector has no components".into()))
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    line_no,
                    format!("vector length {} differs from {d}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if let Some(id) = vocab.get(token) {
            if rows[id].is_none() {
                rows[id] = Some(values);
            }
        }
    }
    let dim = dim.ok_or_else(|| parse_err(0, "file has no vectors".into()))?;
    let mut table = random_init(vocab.len(), dim, seed);
    let mut found = 0;
    for (id, row) in rows.into_iter().enumerate() {
        if let Some(v) = row {
            table.weights_mut().row_mut(id).copy_from_slice(&v);
            found += 1;
        }
    }
    Ok((
        table,
        GloveCoverage {
            found,
            vocab_size: vocab.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use std::io::Write;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        frobenius_norm(&a.sub(b).unwrap()) / frobenius_norm(b)
    }

    #[test]
    fn choose_rank_examples() {
        assert_eq!(choose_rank(0.1, 10_000, 300).unwrap().k, 29);
        assert_eq!(choose_rank(1.0, 100, 100).unwrap().k, 50);
        assert_eq!(choose_rank(0.001, 10, 10).unwrap().k, 1);
        let plan = choose_rank(0.1, 200, 50).unwrap();
        assert_eq!(plan.k, 4);
        assert!((plan.r_pct - 0.9).abs() < 1e-15);
        assert!(choose_rank(0.0, 10, 10).is_err());
        assert!(choose_rank(1.5, 10, 10).is_err());
        assert!(choose_rank(f64::NAN, 10, 10).is_err());
    }

    #[test]
    fn exact_rank_factorization_is_lossless() {
        let w = matmul(&random(40, 3, 1), &random(3, 12, 2), None).unwrap();
        let table = EmbeddingTable::new(w.clone());
        // 40·12/52 ≈ 9.23, so p = 0.35 gives k = 3.
        let (f, plan) = factorize(&table, 0.35).unwrap();
        assert_eq!(plan.k, 3);
        assert!(rel_err(&f.to_dense().unwrap(), &w) <= 1e-8);
        for i in 0..40 {
            let row = f.lookup(i).unwrap();
            for (a, b) in row.iter().zip(w.row(i)) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
        assert!(f.lookup(40).is_err());
    }

    #[test]
    fn full_rank_factorization_at_min_dim() {
        let w = random(9, 6, 3);
        let f = factorize_with_rank(&EmbeddingTable::new(w.clone()), 6).unwrap();
        assert!(rel_err(&f.to_dense().unwrap(), &w) <= 1e-9);
    }

    #[test]
    fn parameter_budget_for_random_table() {
        let table = EmbeddingTable::new(random(200, 50, 4));
        let (f, plan) = factorize(&table, 0.1).unwrap();
        assert_eq!(plan.k, 4);
        assert_eq!(f.parameter_count(), 4 * 250);
        assert!(f.parameter_count() as f64 <= 0.1 * 10_000.0 + 250.0);
        assert_eq!(f.w_a.shape(), (200, 4));
        assert_eq!(f.w_b.shape(), (4, 50));
    }

    #[test]
    fn sigma_lives_in_w_b() {
        let w = random(20, 8, 5);
        let s = svd(&w).unwrap();
        let f = factorize_with_rank(&EmbeddingTable::new(w), 3).unwrap();
        // w_a has orthonormal columns; row norms of w_b are the singular values.
        for (i, sig) in s.sigma.iter().take(3).enumerate() {
            let n = crate::linalg::dot(f.w_b.row(i), f.w_b.row(i)).sqrt();
            assert!((n - sig).abs() < 1e-12);
        }
    }

    #[test]
    fn offline_shape_and_isometry() {
        let table = random_init(1000, 300, 9);
        let p = 30.0 * 1300.0 / 300_000.0 + 1e-9;
        let (small, plan) = offline_compress(&table, p).unwrap();
        assert_eq!(plan.k, 30);
        assert_eq!(small.weights().shape(), (1000, 30));
        assert!(small.weights().is_finite());

        // rank 2 < k: pairwise dot products survive the projection.
        let w = matmul(&random(20, 2, 6), &random(2, 6, 7), None).unwrap();
        let (proj, plan) = offline_compress(&EmbeddingTable::new(w.clone()), 1.0).unwrap();
        assert_eq!(plan.k, 4);
        for i in 0..20 {
            for j in 0..20 {
                let a = crate::linalg::dot(w.row(i), w.row(j));
                let b = crate::linalg::dot(proj.weights().row(i), proj.weights().row(j));
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn offline_rows_match_projected_online_rows() {
        let table = EmbeddingTable::new(random(30, 10, 8));
        let (f, _) = factorize(&table, 0.5).unwrap();
        let (off, _) = offline_compress(&table, 0.5).unwrap();
        let dense = f.to_dense().unwrap();
        for i in 0..30 {
            let a = crate::linalg::dot(off.weights().row(i), off.weights().row(i)).sqrt();
            let b = crate::linalg::dot(dense.row(i), dense.row(i)).sqrt();
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = random_init(50, 300, 1);
        assert_eq!(a, random_init(50, 300, 1));
        assert_ne!(a, random_init(50, 300, 2));
        assert!(a.weights().data().iter().all(|v| v.abs() <= 1.0 / 600.0));
    }

    #[test]
    fn glove_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.txt");
        std::fs::write(&p, "a 1.0 2.0\nb 3.0 4.0\n").unwrap();
        let vocab = Vocabulary::from_tokens(["a", "b", "zzz"]).unwrap();
        let (t, cov) = load_glove_text(&p, &vocab, 0).unwrap();
        assert_eq!(t.lookup(1).unwrap(), &[1.0, 2.0]);
        assert_eq!(t.lookup(2).unwrap(), &[3.0, 4.0]);
        // UNK and "zzz" fall back to the init law.
        assert_eq!(t.lookup(3).unwrap(), random_init(4, 2, 0).lookup(3).unwrap());
        assert_eq!(cov.found, 2);
        assert!((cov.fraction() - 0.5).abs() < 1e-15);

        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "a 1.0 x").unwrap();
        let err = load_glove_text(&p, &vocab, 0).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        std::fs::write(&p, "a 1.0 2.0\nb 3.0\n").unwrap();
        let err = load_glove_text(&p, &vocab, 0).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn rank_formula_invariants(p in 0.0001f64..=1.0, m in 1usize..5000, n in 1usize..1000) {
            let plan = choose_rank(p, m, n).unwrap();
            let bound = p * m as f64 * n as f64;
            proptest::prop_assert!((plan.k * (m + n)) as f64 <= bound + (m + n) as f64);
            if (bound / (m + n) as f64) >= 1.0 {
                proptest::prop_assert!((plan.k * (m + n)) as f64 <= bound * (1.0 + 1e-12));
            }
            proptest::prop_assert_eq!(plan.r_pct, 1.0 - p);
        }

        #[test]
        fn eckart_young_ordering(seed in 0u64..5000) {
            let w = random(12, 9, seed);
            let table = EmbeddingTable::new(w.clone());
            let mut prev = f64::INFINITY;
            for k in 1..=9 {
                let f = factorize_with_rank(&table, k).unwrap();
                let e = frobenius_norm(&f.to_dense().unwrap().sub(&w).unwrap());
                proptest::prop_assert!(e <= prev + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn synthetic_pretrained_hides_classes_below_noise() {
        let classes: Vec<Vec<usize>> = (0..4).map(|c| (100 + c * 100..200 + c * 100).collect()).collect();
        let a = synthetic_pretrained(500, 64, &classes, 0.08, 0.1, 3).unwrap();
        assert_eq!(a, synthetic_pretrained(500, 64, &classes, 0.08, 0.1, 3).unwrap());
        // class means separate cleanly even though no singular value stands out
        let mean = |c: usize| -> Vec<f64> {
            let mut m = vec![0.0; 64];
            for &t in &classes[c] {
                for (x, v) in m.iter_mut().zip(a.lookup(t).unwrap()) {
                    *x += v / 100.0;
                }
            }
            m
        };
        let (m0, m1) = (mean(0), mean(1));
        let gap: f64 = m0.iter().zip(&m1).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(gap > 0.08, "{gap}");
        let s = svd(a.weights()).unwrap();
        assert!(s.sigma[0] / s.sigma[4] < 1.2);
        assert!(synthetic_pretrained(10, 4, &[vec![10]], 0.1, 0.1, 0).is_err());
    }
}
