//! Logits, infoNCE and the descriptor-norm regularizer.

use super::QueueMatrix;
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::real::{dot, Real};

/// `[d_q·d_k, d_q·Q_1, ..., d_q·Q_K] / tau`; index 0 is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector<T>(pub Vec<T>);

impl<T: Real> LogitVector<T> {
    pub fn positive(&self) -> T {
        self.0[0]
    }
}

pub fn compute_logits<T: Real>(
    d_q: &FeatureVector<T>,
    d_k: &FeatureVector<T>,
    queue: &QueueMatrix<T>,
    tau: f64,
) -> Result<LogitVector<T>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    for v in [d_k.dim(), queue.dim()] {
        if v != d_q.dim() {
            return Err(Error::DimensionMismatch {
                expected: d_q.dim(),
                actual: v,
            });
        }
    }
    let tau = T::of(tau);
    let mut out = Vec::with_capacity(queue.capacity() + 1);
    out.push(dot(d_q.values(), d_k.values()) / tau);
    out.extend(queue.columns().map(|c| dot(d_q.values(), c) / tau));
    Ok(LogitVector(out))
}

/// `-log softmax(l)_0` in the max-shifted form: `(max - l_0) + ln sum exp(l_i - max)`.
pub fn info_nce<T: Real>(logits: &LogitVector<T>) -> T {
    let l = &logits.0;
    let max = l.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = l.iter().map(|&v| (v - max).exp()).sum();
    (max - l[0]) + sum.ln()
}

/// Gradient of [`info_nce`] with respect to the logits: `softmax(l) - e_0`.
pub fn info_nce_grad<T: Real>(logits: &LogitVector<T>) -> Vec<T> {
    let l = &logits.0;
    let max = l.iter().copied().fold(T::neg_infinity(), T::max);
    let mut g: Vec<T> = l.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = g.iter().copied().sum();
    for v in g.iter_mut() {
        *v = *v / sum;
    }
    g[0] = g[0] - T::one();
    g
}

/// `(|d_raw| - 1)^2` and its gradient `2(|d| - 1) d / |d|` (zero for `|d| < 1e-12`).
pub fn norm_regularizer<T: Real>(d_raw: &[T]) -> (T, Vec<T>) {
    let norm = d_raw.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let excess = norm - T::one();
    let penalty = excess * excess;
    if norm.f64() < 1e-12 {
        return (penalty, vec![T::zero(); d_raw.len()]);
    }
    let scale = T::of(2.0) * excess / norm;
    (penalty, d_raw.iter().map(|v| scale * *v).collect())
}
