//! Numeric guards and dense linear algebra helpers shared by the oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Floor applied to every probability before a logarithm or a division.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

#[inline]
pub fn safe_ln(p: f64) -> f64 {
    clamp_prob(p).ln()
}

/// `x ln x` with the convention `0 ln 0 = 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub(crate) fn solve(a: DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    a.lu().solve(b).ok_or(Error::Singular(context))
}

/// Row-wise numerically stable softmax into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `max |a - b| / max(max |b|, floor)`: relative error measured against the
/// reference vector's scale rather than per entry.
pub fn max_relative_error(a: &[f64], reference: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = reference.iter().map(|x| x.abs()).fold(0.0, f64::max).max(floor);
    diff / scale
}
