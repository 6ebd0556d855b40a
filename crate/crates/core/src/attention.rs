//! Scaled dot-product and multi-head attention with a pluggable row normalizer.
//!
//! Logits are scaled by `1/√d_head` per head. Attention matrices are
//! materialised so their rows can be inspected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalizers::{normalize_rows, vjp, Normalizer};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub normalizer: Normalizer,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, normalizer: Normalizer) -> Result<Self> {
        let cfg = Self {
            d_model,
            n_heads,
            normalizer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must be positive and divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Projection weights, stored `[in × out]` so that `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_q: Option<Vec<S>>,
    pub b_k: Option<Vec<S>>,
    pub b_v: Option<Vec<S>>,
    pub b_o: Option<Vec<S>>,
}

impl<S: Scalar> AttentionWeights<S> {
    pub fn zeros(d_model: usize) -> Self {
        let z = || Tensor::zeros(&[d_model, d_model]);
        Self {
            w_q: z(),
            w_k: z(),
            w_v: z(),
            w_o: z(),
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }

    /// Truncated-normal weights and zero biases.
    pub fn init(d_model: usize, std: f64, rng: &mut Rng) -> Self {
        let mut w = || Tensor::from_fn(&[d_model, d_model], |_| S::of(rng.trunc_normal(std)));
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let b = || Some(vec![S::zero(); d_model]);
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: b(),
            b_k: b(),
            b_v: b(),
            b_o: b(),
        }
    }

    pub fn check(&self, d_model: usize) -> Result<()> {
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [d_model, d_model] {
                return Err(Error::dim("attention weights", w.shape(), &[d_model, d_model]));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o].into_iter().flatten() {
            if b.len() != d_model {
                return Err(Error::dim("attention bias", &[b.len()], &[d_model]));
            }
        }
        Ok(())
    }
}

pub(crate) fn affine<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&[S]>) -> Result<Tensor<S>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}

/// `A = normalize(Q Kᵀ / √d_head)`, `Y = A V`.
pub fn attend<S: Scalar>(
    cfg: &AttentionConfig,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::dim("attend", q.shape(), k.shape()));
    }
    let d_head = cfg.d_head();
    if q.dim(1) != d_head || k.dim(1) != d_head || q.dim(0) != k.dim(0) {
        return Err(Error::dim("attend (Q vs K)", q.shape(), k.shape()));
    }
    if v.dim(0) != k.dim(0) {
        return Err(Error::dim("attend (K vs V)", k.shape(), v.shape()));
    }
    let scale = S::one() / S::of(d_head as f64).sqrt();
    let logits = q.matmul_t(k)?.scale(scale);
    let (a, _) = normalize_rows(cfg.normalizer, &logits)?;
    let y = a.matmul(v)?;
    Ok((y, a))
}

fn head_columns<S: Scalar>(x: &Tensor<S>, head: usize, d_head: usize) -> Tensor<S> {
    let t = x.dim(0);
    let lo = head * d_head;
    Tensor::from_fn(&[t, d_head], |i| x.row(i / d_head)[lo + i % d_head])
}

/// Split heads, attend per head, concatenate, project.
///
/// Returns `Y: [T × d_model]` and every head's attention, `[heads × T × T]`.
pub fn multi_head_attend<S: Scalar>(
    cfg: &AttentionConfig,
    weights: &AttentionWeights<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    cfg.validate()?;
    weights.check(cfg.d_model)?;
    if x.ndim() != 2 || x.dim(1) != cfg.d_model {
        return Err(Error::dim("multi_head_attend", x.shape(), &[cfg.d_model]));
    }
    let t = x.dim(0);
    let dh = cfg.d_head();
    let q = affine(x, &weights.w_q, weights.b_q.as_deref())?;
    let k = affine(x, &weights.w_k, weights.b_k.as_deref())?;
    let v = affine(x, &weights.w_v, weights.b_v.as_deref())?;
    let mut heads_out = Vec::with_capacity(cfg.n_heads);
    let mut maps = Vec::with_capacity(cfg.n_heads * t * t);
    for h in 0..cfg.n_heads {
        let (y, a) = attend(
            cfg,
            &head_columns(&q, h, dh),
            &head_columns(&k, h, dh),
            &head_columns(&v, h, dh),
        )?;
        maps.extend_from_slice(a.data());
        heads_out.push(y);
    }
    let refs: Vec<&Tensor<S>> = heads_out.iter().collect();
    let merged = Tensor::concat(&refs, 1)?;
    let y = affine(&merged, &weights.w_o, weights.b_o.as_deref())?;
    Ok((y, Tensor::new(vec![cfg.n_heads, t, t], maps)?))
}

/// Gradient of `⟨upstream_y, normalize(logits) · V⟩` with respect to `logits`.
///
/// `logits` are taken as already scaled; each row goes through the
/// configured normalizer's VJP.
pub fn attend_grad_logits<S: Scalar>(
    cfg: &AttentionConfig,
    logits: &Tensor<S>,
    v: &Tensor<S>,
    upstream_y: &Tensor<S>,
) -> Result<Tensor<S>> {
    if logits.ndim() != 2 || logits.dim(0) != logits.dim(1) {
        return Err(Error::dim("attend_grad_logits (logits)", logits.shape(), &[2]));
    }
    let t = logits.dim(0);
    if v.ndim() != 2 || v.dim(0) != t || upstream_y.shape() != [t, v.dim(1)] {
        return Err(Error::dim("attend_grad_logits (V vs dY)", v.shape(), upstream_y.shape()));
    }
    if !logits.is_finite() {
        return Err(Error::InvalidArgument("attend_grad_logits: non-finite logits".into()));
    }
    let (_, results) = normalize_rows(cfg.normalizer, logits)?;
    // dL/dA = dY · Vᵀ
    let grad_a = upstream_y.matmul_t(v)?;
    let mut out = Tensor::zeros(&[t, t]);
    for (r, res) in results.iter().enumerate() {
        let g = vjp(res, grad_a.row(r))?;
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}
