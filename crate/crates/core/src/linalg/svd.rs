//! One-sided (Hestenes) Jacobi singular value decomposition.
//!
//! The tall case `m >= n` orthogonalizes the columns of a working copy of
//! `W` by plane rotations, accumulating the rotations into `V`. On
//! convergence the column norms are the singular values and the normalized
//! columns are the left singular vectors. Wide inputs are transposed and the
//! factors swapped on the way out.

use super::{dot, frobenius_norm, DenseMatrix};
use crate::error::{Error, Result};

/// Sweep cap before giving up.
pub const MAX_SWEEPS: usize = 60;

/// Thin SVD `W = U · diag(sigma) · Vᵀ` with `r = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m × r, orthonormal columns.
    pub u: DenseMatrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// r × n, orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

pub fn svd(w: &DenseMatrix) -> Result<SvdResult> {
    w.ensure_finite("svd input")?;
    if w.rows() >= w.cols() {
        svd_tall(w)
    } else {
        // Wᵀ = U S Vᵀ  =>  W = V S Uᵀ
        let t = svd_tall(&w.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        })
    }
}

fn svd_tall(w: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = w.shape();
    debug_assert!(m >= n);

    // Column-major working copies: cols[j] is column j of W·V, v[j] is column j of V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro = frobenius_norm(w);
    let fro_sq = fro * fro;
    let eps = f64::EPSILON;
    // Rotate a pair while its cosine exceeds this.
    let tol = (m as f64) * eps;
    // Columns with squared norm below this are numerically zero.
    let negligible = (m as f64 * eps * fro).powi(2);

    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        let mut residual: f64 = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                residual = residual.max(gamma.abs());
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::SvdNoConvergence {
                sweeps,
                residual: if fro_sq > 0.0 { residual / fro_sq } else { 0.0 },
            });
        }
    }

    let sigma_raw: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal values keep sweep order.
    order.sort_by(|&a, &b| sigma_raw[b].total_cmp(&sigma_raw[a]));

    let sigma: Vec<f64> = order.iter().map(|&j| sigma_raw[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let deficient = sigma_max * (m as f64) * eps;

    // Columns that are numerically zero carry no direction; their noise is
    // not orthogonal to anything, so they are re-orthogonalized against the
    // larger columns and replaced outright if little survives.
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        let s = sigma_raw[j];
        if s <= deficient || s == 0.0 {
            u_cols.push(None);
            continue;
        }
        let mut col: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
        orthogonalize(&mut col, &u_cols);
        let norm = dot(&col, &col).sqrt();
        if norm < 0.5 {
            u_cols.push(None);
        } else {
            col.iter_mut().for_each(|x| *x /= norm);
            u_cols.push(Some(col));
        }
    }
    complete_orthonormal(&mut u_cols, m);

    let u = DenseMatrix::from_fn(m, n, |i, j| u_cols[j].as_ref().expect("completed")[i]);
    let vt = DenseMatrix::from_fn(n, n, |i, j| v[order[i]][j]);
    Ok(SvdResult { u, sigma, vt })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Two passes of modified Gram-Schmidt against the filled slots.
fn orthogonalize(x: &mut [f64], basis: &[Option<Vec<f64>>]) {
    for _ in 0..2 {
        for u in basis.iter().flatten() {
            let proj = dot(u, x);
            for (c, ui) in x.iter_mut().zip(u) {
                *c -= proj * ui;
            }
        }
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other slot,
/// drawn from the standard basis by twice-repeated Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], m: usize) {
    let missing: Vec<usize> = (0..cols.len()).filter(|&j| cols[j].is_none()).collect();
    if missing.is_empty() {
        return;
    }
    // Some basis vector always keeps at least 1/m of its squared length.
    let accept = 0.5 / m as f64;
    let mut basis = 0;
    for slot in missing {
        loop {
            assert!(basis < m, "orthonormal completion exhausted the basis");
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            orthogonalize(&mut cand, cols);
            let norm_sq = dot(&cand, &cand);
            if norm_sq >= accept {
                let norm = norm_sq.sqrt();
                cand.iter_mut().for_each(|c| *c /= norm);
                cols[slot] = Some(cand);
                break;
            }
        }
    }
}

/// Keeps the leading `k` singular triplets.
pub fn truncate_svd(s: &SvdResult, k: usize) -> Result<SvdResult> {
    if k == 0 || k > s.sigma.len() {
        return Err(Error::invalid(format!(
            "truncation rank {k} outside 1..={}",
            s.sigma.len()
        )));
    }
    Ok(SvdResult {
        u: s.u.take_cols(k),
        sigma: s.sigma[..k].to_vec(),
        vt: s.vt.take_rows(k),
    })
}

/// `U · diag(sigma) · Vᵀ`.
pub fn reconstruct(s: &SvdResult) -> DenseMatrix {
    let mut us = s.u.clone();
    let r = s.sigma.len();
    for i in 0..us.rows() {
        for (x, sig) in us.row_mut(i).iter_mut().zip(&s.sigma) {
            *x *= sig;
        }
    }
    debug_assert_eq!(us.cols(), r);
    super::matmul_fast(&us, &s.vt)
}
