//! Vector and softmax primitives, generic over the scalar type.
//!
//! Stored embeddings use f32 while all training math runs in f64, so every
//! routine here is generic over [`Scalar`] and monomorphized for both.

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point scalar usable by every numeric routine in this crate.
pub trait Scalar: Float + core::iter::Sum + core::fmt::Debug + Default + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product; panics are avoided by the caller checking lengths.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

/// Scales v to unit norm. A zero vector is returned unchanged; callers that
/// must not store zero vectors guard for that case themselves.
pub fn l2_normalize<S: Scalar>(v: &mut [S]) {
    let n = l2_norm(v);
    if n > S::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

/// Cosine similarity dot(a,b)/(|a||b|), clamped into [-1, 1].
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == S::zero() || nb == S::zero() {
        return Err(Error::NumericalInstability { context: "cosine of zero vector".into() });
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.min(S::one()).max(-S::one()))
}

/// Temperature softmax over raw scores: softmax(scores / eta).
/// Stabilized by max-subtraction before exponentiation.
pub fn softmax_with_temperature<S: Scalar>(scores: &[S], eta: S) -> Result<Vec<S>> {
    if scores.is_empty() {
        return Err(Error::NumericalInstability { context: "softmax of empty score list".into() });
    }
    if !(eta > S::zero()) {
        return Err(Error::NumericalInstability { context: "non-positive softmax temperature".into() });
    }
    let scaled: Vec<S> = scores.iter().map(|&s| s / eta).collect();
    let max = scaled.iter().cloned().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return Err(Error::NumericalInstability { context: "non-finite softmax input".into() });
    }
    let exps: Vec<S> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: S = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Dense row-major matrix-vector product: y = M v, M of shape dim x dim.
pub fn mat_vec<S: Scalar>(m: &[S], v: &[S]) -> Vec<S> {
    let dim = v.len();
    debug_assert_eq!(m.len(), dim * dim);
    (0..dim).map(|r| dot(&m[r * dim..(r + 1) * dim], v)).collect()
}

/// The dim x dim identity matrix, row-major.
pub fn identity<S: Scalar>(dim: usize) -> Vec<S> {
    let mut m = vec![S::zero(); dim * dim];
    for i in 0..dim {
        m[i * dim + i] = S::one();
    }
    m
}
