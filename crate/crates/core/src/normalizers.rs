//! Probability mappings for attention rows: softmax and exact entmax-1.5.
//!
//! entmax-1.5 maps a score vector `z` to
//!
//! ```text
//! p_i = [(z_i − τ) / 2]₊²      with τ chosen so that Σ p_i = 1.
//! ```
//!
//! Two solvers are provided. [`entmax15_bisect`] bisects the monotone scalar
//! equation for τ and is the reference. [`entmax15_sort`] finds the support
//! size exactly from sorted scores and is the fast path used by attention.
//! Both subtract `max(z)` first and accumulate every sum over the scores in
//! sorted order, so permuting the input permutes the output bit for bit.
//!
//! Entries with `z_i == τ` get `p_i = 0`: the support is the set of strictly
//! positive probabilities.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Default bisection tolerance on τ.
pub const DEFAULT_BISECT_TOL: f64 = 1e-12;

const MAX_BISECT_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    Softmax,
    Entmax15,
}

impl std::str::FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalizer::Softmax),
            "entmax15" | "entmax-1.5" | "entmax" => Ok(Normalizer::Entmax15),
            other => Err(Error::InvalidArgument(format!("unknown normalizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for Normalizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Entmax15 => "entmax15",
        })
    }
}

/// A validated, non-empty row of finite scores.
#[derive(Debug, Clone, Copy)]
pub struct LogitVector<'a, S>(&'a [S]);

impl<'a, S: Scalar> LogitVector<'a, S> {
    pub fn new(z: &'a [S]) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidArgument("logit vector must be non-empty".into()));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite logit at index {i}")));
        }
        Ok(Self(z))
    }

    pub fn as_slice(&self) -> &'a [S] {
        self.0
    }
}

/// Output of a normalizer: a point on the simplex, its support, and τ.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerResult<S> {
    kind: Normalizer,
    p: Vec<S>,
    tau: Option<S>,
    support: Vec<bool>,
}

impl<S: Scalar> NormalizerResult<S> {
    pub fn kind(&self) -> Normalizer {
        self.kind
    }

    pub fn p(&self) -> &[S] {
        &self.p
    }

    pub fn into_p(self) -> Vec<S> {
        self.p
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    pub fn support_size(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    /// The entmax threshold.
    ///
    /// # Panics
    ///
    /// Softmax has no threshold; asking for one is a contract violation.
    pub fn tau(&self) -> S {
        self.tau.expect("tau is undefined for a softmax result")
    }

    pub fn try_tau(&self) -> Option<S> {
        self.tau
    }

    fn from_p(kind: Normalizer, p: Vec<S>, tau: Option<S>) -> Self {
        let support = p.iter().map(|&v| v > S::zero()).collect();
        Self { kind, p, tau, support }
    }
}

fn max_of<S: Scalar>(z: &[S]) -> S {
    z.iter().copied().fold(S::neg_infinity(), S::max)
}

/// Scores shifted by `-max(z)`, sorted descending.
fn sorted_shifted<S: Scalar>(z: &[S], max: S) -> Vec<S> {
    let mut u: Vec<S> = z.iter().map(|&v| v - max).collect();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    u
}

fn uniform<S: Scalar>(kind: Normalizer, n: usize, c: S) -> NormalizerResult<S> {
    let nn = S::of(n as f64);
    let p = vec![S::one() / nn; n];
    let tau = match kind {
        Normalizer::Softmax => None,
        // n·((c − τ)/2)² = 1
        Normalizer::Entmax15 => Some(c - S::of(2.0) / nn.sqrt()),
    };
    NormalizerResult::from_p(kind, p, tau)
}

/// Max-subtracted softmax. The normaliser is summed over sorted exponents.
pub fn softmax<S: Scalar>(z: &[S]) -> Result<NormalizerResult<S>> {
    let z = LogitVector::new(z)?.as_slice();
    let max = max_of(z);
    if z.iter().all(|&v| v == max) {
        return Ok(uniform(Normalizer::Softmax, z.len(), max));
    }
    let total: S = sorted_shifted(z, max).into_iter().map(S::exp).sum();
    let p = z.iter().map(|&v| (v - max).exp() / total).collect();
    Ok(NormalizerResult::from_p(Normalizer::Softmax, p, None))
}

/// `Σ_i max((u_i − t)/2, 0)²` over descending `u`.
fn entmax_mass<S: Scalar>(u_desc: &[S], t: S) -> S {
    let half = S::of(0.5);
    let mut acc = S::zero();
    for &u in u_desc {
        if u <= t {
            break;
        }
        let s = (u - t) * half;
        acc += s * s;
    }
    acc
}

/// Builds `p` from a threshold on shifted scores and spreads the residual
/// `1 − Σp` over the support in proportion to `√p`, which is the first-order
/// τ correction. Returns the probabilities and the corrected threshold.
fn entmax_from_threshold<S: Scalar>(z: &[S], u_desc: &[S], max: S, t: S) -> (Vec<S>, S) {
    let half = S::of(0.5);
    let gap = |v: S| if v > t { (v - t) * half } else { S::zero() };
    let k = u_desc.iter().take_while(|&&u| u > t).count();
    if k == 1 {
        let p = z.iter().map(|&v| if v - max > t { S::one() } else { S::zero() }).collect();
        return (p, t + max);
    }
    let (mut mass, mut sum_s) = (S::zero(), S::zero());
    for &u in &u_desc[..k] {
        let s = gap(u);
        mass += s * s;
        sum_s += s;
    }
    let residual = S::one() - mass;
    let p = z
        .iter()
        .map(|&v| {
            let s = gap(v - max);
            if s > S::zero() {
                s * s + residual * s / sum_s
            } else {
                S::zero()
            }
        })
        .collect();
    // S(τ) has slope −Σs, so shifting τ by −residual/Σs absorbs the residual.
    (p, t - residual / sum_s + max)
}

/// Reference solver: bisection on τ to absolute tolerance `tol`.
pub fn entmax15_bisect<S: Scalar>(z: &[S], tol: S) -> Result<NormalizerResult<S>> {
    entmax15_bisect_impl(z, tol, None)
}

fn entmax15_bisect_impl<S: Scalar>(z: &[S], tol: S, fault: Option<S>) -> Result<NormalizerResult<S>> {
    let z = LogitVector::new(z)?.as_slice();
    if !(tol > S::zero()) {
        return Err(Error::InvalidArgument("bisection tolerance must be positive".into()));
    }
    let max = max_of(z);
    if fault.is_none() && z.iter().all(|&v| v == max) {
        return Ok(uniform(Normalizer::Entmax15, z.len(), max));
    }
    let u = sorted_shifted(z, max);
    // After the shift, S(−2) ≥ 1 (the top entry alone contributes 1) and S(0) = 0.
    let (mut lo, mut hi) = (S::of(-2.0), S::zero());
    let one = S::one();
    for _ in 0..MAX_BISECT_ITERS {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) * S::of(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if entmax_mass(&u, mid) >= one {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (lo + hi) * S::of(0.5);
    if let Some(offset) = fault {
        let t = t + offset;
        let half = S::of(0.5);
        let p = z
            .iter()
            .map(|&v| {
                let s = (v - max - t) * half;
                if s > S::zero() {
                    s * s
                } else {
                    S::zero()
                }
            })
            .collect();
        return Ok(NormalizerResult::from_p(Normalizer::Entmax15, p, Some(t + max)));
    }
    let (p, tau) = entmax_from_threshold(z, &u, max, t);
    Ok(NormalizerResult::from_p(Normalizer::Entmax15, p, Some(tau)))
}

/// Exact solver: sorts half-scores and picks the support size directly.
pub fn entmax15_sort<S: Scalar>(z: &[S]) -> Result<NormalizerResult<S>> {
    let z = LogitVector::new(z)?.as_slice();
    let max = max_of(z);
    if z.iter().all(|&v| v == max) {
        return Ok(uniform(Normalizer::Entmax15, z.len(), max));
    }
    let half = S::of(0.5);
    let u = sorted_shifted(z, max);
    let uh: Vec<S> = u.iter().map(|&v| v * half).collect();

    // For support size k, τ/2 solves Σ_{i≤k} (u_i − τ/2)² = 1 (smaller root).
    let (mut cs, mut csq) = (S::zero(), S::zero());
    let mut chosen: Option<(usize, S)> = None;
    for (idx, &v) in uh.iter().enumerate() {
        let k = S::of((idx + 1) as f64);
        cs += v;
        csq += v * v;
        let mean = cs / k;
        let delta = (S::one() - (csq - cs * mean)) / k;
        let thr = mean - delta.max(S::zero()).sqrt();
        if v > thr {
            chosen = Some((idx + 1, thr));
        } else {
            break;
        }
    }
    let (k, thr) = chosen.ok_or_else(|| Error::Internal("entmax15_sort: no support size satisfies the bracket".into()))?;
    if let Some(&next) = uh.get(k) {
        let slack = S::of(1e-9) * (S::one() + next.abs());
        if next > thr + slack {
            return Err(Error::Internal(format!(
                "entmax15_sort: support size {k} violates the bracket (next score {next} > threshold {thr})"
            )));
        }
    }
    let (p, tau) = entmax_from_threshold(z, &u, max, thr + thr);
    Ok(NormalizerResult::from_p(Normalizer::Entmax15, p, Some(tau)))
}

/// entmax-1.5 via the exact sort-based solver.
pub fn entmax15<S: Scalar>(z: &[S]) -> Result<NormalizerResult<S>> {
    entmax15_sort(z)
}

pub fn normalize<S: Scalar>(kind: Normalizer, z: &[S]) -> Result<NormalizerResult<S>> {
    match kind {
        Normalizer::Softmax => softmax(z),
        Normalizer::Entmax15 => entmax15_sort(z),
    }
}

fn check_upstream<S: Scalar>(result: &NormalizerResult<S>, upstream: &[S]) -> Result<()> {
    if upstream.len() != result.p.len() {
        return Err(Error::dim("vjp", &[result.p.len()], &[upstream.len()]));
    }
    Ok(())
}

/// `gᵀ ∂p/∂z` for entmax-1.5, with `∂p/∂z = diag(s) − s sᵀ / ‖s‖₁`, `s = √p`.
pub fn entmax15_vjp<S: Scalar>(result: &NormalizerResult<S>, upstream: &[S]) -> Result<Vec<S>> {
    check_upstream(result, upstream)?;
    let s: Vec<S> = result
        .p
        .iter()
        .zip(&result.support)
        .map(|(&p, &on)| if on { p.sqrt() } else { S::zero() })
        .collect();
    let sum_s: S = s.iter().copied().sum();
    let sg: S = s.iter().zip(upstream).map(|(&a, &b)| a * b).sum();
    let mean = sg / sum_s;
    Ok(s.iter().zip(upstream).map(|(&si, &gi)| si * (gi - mean)).collect())
}

/// `p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_vjp<S: Scalar>(result: &NormalizerResult<S>, upstream: &[S]) -> Result<Vec<S>> {
    check_upstream(result, upstream)?;
    let gp: S = result.p.iter().zip(upstream).map(|(&p, &g)| p * g).sum();
    Ok(result.p.iter().zip(upstream).map(|(&p, &g)| p * (g - gp)).collect())
}

/// Dispatches to the VJP matching the result's normalizer.
pub fn vjp<S: Scalar>(result: &NormalizerResult<S>, upstream: &[S]) -> Result<Vec<S>> {
    match result.kind {
        Normalizer::Softmax => softmax_vjp(result, upstream),
        Normalizer::Entmax15 => entmax15_vjp(result, upstream),
    }
}

/// Normalises every last-axis row of `logits`.
pub fn normalize_rows<S: Scalar>(kind: Normalizer, logits: &Tensor<S>) -> Result<(Tensor<S>, Vec<NormalizerResult<S>>)> {
    let mut out = Tensor::zeros(logits.shape());
    let mut results = Vec::with_capacity(logits.n_rows());
    for r in 0..logits.n_rows() {
        let res = normalize(kind, logits.row(r))?;
        out.row_mut(r).copy_from_slice(res.p());
        results.push(res);
    }
    Ok((out, results))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportStats {
    pub rows: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Fraction of strictly positive entries per row, aggregated over rows.
pub fn support_stats<S: Scalar>(p_batch: &Tensor<S>) -> Result<SupportStats> {
    let n = p_batch.row_len();
    if n == 0 || p_batch.n_rows() == 0 {
        return Err(Error::Validation("support_stats needs at least one non-empty row".into()));
    }
    let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for (r, row) in p_batch.rows().enumerate() {
        let total: f64 = row.iter().map(|v| v.to_f64_lossless()).sum();
        if row.iter().any(|&v| v < S::zero() || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "row {r} is not on the simplex (sum = {total})"
            )));
        }
        let frac = row.iter().filter(|&&v| v > S::zero()).count() as f64 / n as f64;
        sum += frac;
        min = min.min(frac);
        max = max.max(frac);
    }
    let rows = p_batch.n_rows();
    Ok(SupportStats {
        rows,
        mean: sum / rows as f64,
        min,
        max,
    })
}

/// Fault injection for negative-control runs of the acceptance suite.
#[doc(hidden)]
pub mod faults {
    use super::*;

    /// Bisection entmax whose final threshold is shifted by `offset` and
    /// left uncorrected.
    pub fn entmax15_shifted_tau<S: Scalar>(z: &[S], tol: S, offset: S) -> Result<NormalizerResult<S>> {
        entmax15_bisect_impl(z, tol, Some(offset))
    }
}
