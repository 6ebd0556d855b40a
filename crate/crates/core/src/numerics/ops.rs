use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LN_EPS: f64 = 1e-6;

/// Layer normalisation over the last axis, using the population variance.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S], eps: S) -> Result<Tensor<S>> {
    let d = x.row_len();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), &[gamma.len(), beta.len()]));
    }
    if !(eps > S::zero()) {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let n = S::of(d as f64);
    let mut out = x.clone();
    for r in 0..out.n_rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let inv = S::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Exact GELU: `x · Φ(x)` with Φ the standard normal CDF.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Cosine similarity between every row of `a` and every row of `b`.
///
/// Zero-norm rows give similarity 0.
pub fn cosine_similarity<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1) {
        return Err(Error::dim("cosine_similarity", a.shape(), b.shape()));
    }
    let norms = |t: &Tensor<S>| -> Vec<S> { t.rows().map(|r| dot(r, r).sqrt()).collect() };
    let (na, nb) = (norms(a), norms(b));
    let mut out = Vec::with_capacity(a.dim(0) * b.dim(0));
    for (i, ra) in a.rows().enumerate() {
        for (j, rb) in b.rows().enumerate() {
            let denom = na[i] * nb[j];
            out.push(if denom > S::zero() {
                dot(ra, rb) / denom
            } else {
                S::zero()
            });
        }
    }
    Tensor::new(vec![a.dim(0), b.dim(0)], out)
}
