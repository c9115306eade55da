//! Closed-form cost model for a dense versus a factorized embedding layer,
//! plus a wall-clock timing harness.
//!
//! A lookup through an `m × n` table is modelled as a `1 × m` by `m × n`
//! product, `(2m − 1)·n` FLOPs; the factorized pair costs
//! `(2m − 1)·k + (2k − 1)·n`. Exact inequalities are always reported next to
//! the large-dimension approximations, since the two disagree for small
//! shapes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::choose_rank;
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareCostModel {
    /// Bits per full-precision weight.
    pub b_s: u32,
    /// Bits per quantized weight.
    pub b_q: u32,
    /// Time per full-precision FLOP.
    pub t_s: f64,
    /// Time per low-precision FLOP.
    pub t_q: f64,
}

impl Default for HardwareCostModel {
    /// 32-bit versus 8-bit, with time per FLOP proportional to bits.
    fn default() -> Self {
        Self::proportional(32, 8)
    }
}

impl HardwareCostModel {
    pub fn proportional(b_s: u32, b_q: u32) -> Self {
        Self {
            b_s,
            b_q,
            t_s: 1.0,
            t_q: f64::from(b_q) / f64::from(b_s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_q == 0 || self.b_q >= self.b_s {
            return Err(Error::invalid(format!(
                "need 0 < b_q < b_s, got b_q={} b_s={}",
                self.b_q, self.b_s
            )));
        }
        if !(self.t_q > 0.0 && self.t_q <= self.t_s && self.t_s.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < t_q <= t_s, got t_q={} t_s={}",
                self.t_q, self.t_s
            )));
        }
        Ok(())
    }
}

/// `(2m − 1)·n`.
pub fn flops_dense(m: u64, n: u64) -> u64 {
    (2 * m - 1) * n
}

/// `2(m + n)·k − (n + k)`.
pub fn flops_factorized(m: u64, n: u64, k: u64) -> u64 {
    2 * (m + n) * k - (n + k)
}

/// One side-by-side comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Condition {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Condition {
    fn less(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs < rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FewerFlops {
    /// Decided in integers: `k·(2(m+n) − 1) < 2mn`.
    pub holds: bool,
    /// `2mn / (2(m+n) − 1)`.
    pub threshold: f64,
    pub approx_holds: bool,
    /// `mn / (m+n)`.
    pub approx_threshold: f64,
}

pub fn fewer_flops_condition(m: u64, n: u64, k: u64) -> FewerFlops {
    let (mf, nf) = (m as f64, n as f64);
    FewerFlops {
        holds: u128::from(k) * u128::from(2 * (m + n) - 1) < 2 * u128::from(m) * u128::from(n),
        threshold: 2.0 * mf * nf / (2.0 * (mf + nf) - 1.0),
        approx_holds: u128::from(k) * u128::from(m + n) < u128::from(m) * u128::from(n),
        approx_threshold: mf * nf / (mf + nf),
    }
}

/// `p < b_q / b_s`.
pub fn space_condition(p: f64, hw: &HardwareCostModel) -> Condition {
    Condition::less(p, f64::from(hw.b_q) / f64::from(hw.b_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    /// `F_S·t_s < F_Q·t_q`.
    pub exact: Condition,
    /// `k(m+n)/(mn) < t_q/t_s`.
    pub approx: Condition,
}

pub fn latency_condition(m: u64, n: u64, k: u64, hw: &HardwareCostModel) -> Latency {
    let f_q = flops_dense(m, n) as f64;
    let f_s = flops_factorized(m, n, k) as f64;
    let p = k as f64 * (m + n) as f64 / (m as f64 * n as f64);
    Latency {
        exact: Condition::less(f_s * hw.t_s, f_q * hw.t_q),
        approx: Condition::less(p, hw.t_q / hw.t_s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub m: u64,
    pub n: u64,
    pub p: f64,
    pub k: u64,
    pub f_q: u64,
    pub f_s: u64,
    pub space: Condition,
    pub fewer_flops: FewerFlops,
    pub latency: Latency,
}

impl FlopReport {
    pub const CSV_HEADER: &'static str = "p,m,n,k,f_q,f_s,space_lhs,space_rhs,space_holds,\
flops_threshold,flops_holds,flops_approx_threshold,flops_approx_holds,\
latency_lhs,latency_rhs,latency_holds,latency_approx_lhs,latency_approx_rhs,latency_approx_holds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{},{:.6},{},{},{},{},{:.6},{},{}",
            self.p,
            self.m,
            self.n,
            self.k,
            self.f_q,
            self.f_s,
            self.space.lhs,
            self.space.rhs,
            self.space.holds,
            self.fewer_flops.threshold,
            self.fewer_flops.holds,
            self.fewer_flops.approx_threshold,
            self.fewer_flops.approx_holds,
            self.latency.exact.lhs,
            self.latency.exact.rhs,
            self.latency.exact.holds,
            self.latency.approx.lhs,
            self.latency.approx.rhs,
            self.latency.approx.holds,
        )
    }
}

/// Every condition for the rank chosen at retention fraction `p`.
pub fn flop_report(m: usize, n: usize, p: f64, hw: &HardwareCostModel) -> Result<FlopReport> {
    hw.validate()?;
    let k = choose_rank(p, m, n)?.k as u64;
    let (m, n) = (m as u64, n as u64);
    Ok(FlopReport {
        m,
        n,
        p,
        k,
        f_q: flops_dense(m, n),
        f_s: flops_factorized(m, n, k),
        space: space_condition(p, hw),
        fewer_flops: fewer_flops_condition(m, n, k),
        latency: latency_condition(m, n, k, hw),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    pub repeats: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            repeats: n,
            mean,
            std: var.sqrt(),
            median,
        }
    }
}

/// Seconds for one eval-mode pass over `data`, after one untimed warmup.
pub fn time_inference(model: &Model, data: &Dataset, repeats: usize) -> Result<TimingStats> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    model.predict_all(data)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(model.predict_all(data)?);
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(TimingStats::from_samples(&samples))
}
