//! Single-head cross-attention.
//!
//! Operands hold one token per row. With `Q = x_a W_q`, `K = x_b W_k` and
//! `V = x_b W_v`,
//!
//! ```text
//!     f(x_a, x_b) = softmax(Q Kᵀ / √d) V
//! ```
//!
//! where the softmax runs along each row (over keys).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T: Scalar> {
    /// `d_in × d_k`
    pub query: Matrix<T>,
    /// `d_in × d_k`
    pub key: Matrix<T>,
    /// `d_in × d_v`
    pub value: Matrix<T>,
    /// Logit scale; logits are divided by `√scale`.
    pub scale: T,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(query: Matrix<T>, key: Matrix<T>, value: Matrix<T>, scale: T) -> Result<Self> {
        let w = Self {
            query,
            key,
            value,
            scale,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.cols() != self.key.cols() {
            return Err(Error::Shape(format!(
                "query projects to {} dims but key to {}",
                self.query.cols(),
                self.key.cols()
            )));
        }
        if !(self.scale > T::zero() && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        for (name, m) in [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
        ] {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("{name} weights")));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Scaled query-key logits `Q Kᵀ / √d`.
pub fn attention_logits<T: Scalar>(
    x_a: &Matrix<T>,
    x_b: &Matrix<T>,
    w: &AttentionWeights<T>,
) -> Result<Matrix<T>> {
    w.validate()?;
    for (name, x) in [("x_a", x_a), ("x_b", x_b)] {
        if !x.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if x_b.rows() == 0 {
        return Err(Error::Empty("x_b has no rows".into()));
    }
    let q = x_a.matmul(&w.query)?;
    let k = x_b.matmul(&w.key)?;
    let inv = T::one() / w.scale.sqrt();
    Ok(q.matmul(&k.transpose())?.map(|x| x * inv))
}

/// Attention matrix `softmax(Q Kᵀ / √d)`, one row per query token.
pub fn attention_matrix<T: Scalar>(
    x_a: &Matrix<T>,
    x_b: &Matrix<T>,
    w: &AttentionWeights<T>,
) -> Result<Matrix<T>> {
    Ok(softmax_rows(&attention_logits(x_a, x_b, w)?))
}

/// `softmax(Q Kᵀ / √d) V`; output is `rows(x_a) × cols(W_v)`.
pub fn cross_attention<T: Scalar>(
    x_a: &Matrix<T>,
    x_b: &Matrix<T>,
    w: &AttentionWeights<T>,
) -> Result<Matrix<T>> {
    let attn = attention_matrix(x_a, x_b, w)?;
    let v = x_b.matmul(&w.value)?;
    attn.matmul(&v)
}
