//! Probability mappings for attention weights: softmax, sparsemax and
//! 1.5-entmax, each with its Jacobian-vector product.
//!
//! sparsemax is the Euclidean projection onto the probability simplex,
//! computed by sort-and-threshold. 1.5-entmax is
//! `p_i = max(z_i/2 - tau, 0)^2` with `tau` located by bisection. Both return
//! exact zeros outside their support.
//!
//! Entries equal to `-inf` are treated as masked (probability zero). At least
//! one finite entry is required; NaN and `+inf` are rejected.

use std::cmp::Ordering;

use crate::error::TensorError;

const ENTMAX_MAX_ITERS: usize = 100;
const ENTMAX_SUM_TOL: f64 = 1e-9;

/// Output of a probability mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDist {
    pub probs: Vec<f64>,
    /// Indices with strictly positive probability, ascending.
    pub support: Vec<usize>,
    /// Threshold for sparsemax/entmax; log-partition for softmax.
    pub threshold_tau: f64,
}

/// Which mapping turns attention scores into weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Normalizer {
    Softmax,
    Sparsemax,
    Entmax15,
}

/// Alias used by the row-wise tape operation.
pub type SparseKind = Normalizer;

impl Normalizer {
    pub fn apply(self, z: &[f64]) -> Result<SparseDist, TensorError> {
        match self {
            Normalizer::Softmax => softmax(z),
            Normalizer::Sparsemax => sparsemax(z),
            Normalizer::Entmax15 => entmax15(z),
        }
    }

    pub fn jvp(self, dist: &SparseDist, upstream: &[f64]) -> Result<Vec<f64>, TensorError> {
        match self {
            Normalizer::Softmax => softmax_jvp(dist, upstream),
            Normalizer::Sparsemax => sparsemax_jvp(dist, upstream),
            Normalizer::Entmax15 => entmax15_jvp(dist, upstream),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Sparsemax => "sparsemax",
            Normalizer::Entmax15 => "entmax15",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(Normalizer::Softmax),
            "sparsemax" => Some(Normalizer::Sparsemax),
            "entmax15" | "entmax" | "entmax1.5" => Some(Normalizer::Entmax15),
            _ => None,
        }
    }
}

fn validate(z: &[f64]) -> Result<(), TensorError> {
    if z.is_empty() {
        return Err(TensorError::Contract("probability mapping of an empty vector".into()));
    }
    if z.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(TensorError::Numeric("scores contain NaN or +inf".into()));
    }
    if z.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(TensorError::Contract("every score is masked".into()));
    }
    Ok(())
}

fn support_of(probs: &[f64]) -> Vec<usize> {
    probs.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, _)| i).collect()
}

fn check_len(dist: &SparseDist, upstream: &[f64]) -> Result<(), TensorError> {
    if dist.probs.len() != upstream.len() {
        return Err(TensorError::ShapeMismatch {
            op: "jvp",
            left: vec![dist.probs.len()],
            right: vec![upstream.len()],
        });
    }
    Ok(())
}

/// Numerically stable softmax written into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax(z: &[f64]) -> Result<SparseDist, TensorError> {
    validate(z)?;
    let mut probs = vec![0.0; z.len()];
    softmax_into(z, &mut probs);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(SparseDist { support: support_of(&probs), probs, threshold_tau: lse })
}

pub fn softmax_jvp(dist: &SparseDist, upstream: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_len(dist, upstream)?;
    let s: f64 = dist.probs.iter().zip(upstream).map(|(p, u)| p * u).sum();
    Ok(dist.probs.iter().zip(upstream).map(|(p, u)| p * (u - s)).collect())
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<SparseDist, TensorError> {
    validate(z)?;
    let mut order: Vec<usize> = (0..z.len()).collect();
    // descending by value, ties by index
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut cumsum = 0.0;
    let mut k_star = 0;
    let mut sum_star = 0.0;
    for (k, &i) in order.iter().enumerate() {
        let v = z[i];
        if v == f64::NEG_INFINITY {
            break;
        }
        cumsum += v;
        let k1 = (k + 1) as f64;
        if 1.0 + k1 * v > cumsum {
            k_star = k + 1;
            sum_star = cumsum;
        }
    }
    // k = 1 always satisfies the condition, so k_star >= 1 here.
    let tau = (sum_star - 1.0) / k_star as f64;
    let probs: Vec<f64> = z.iter().map(|&v| (v - tau).max(0.0)).collect();
    Ok(SparseDist { support: support_of(&probs), probs, threshold_tau: tau })
}

/// `s ⊙ (u − mean_S(u))` where `s` indicates the support `S`.
pub fn sparsemax_jvp(dist: &SparseDist, upstream: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_len(dist, upstream)?;
    let mut out = vec![0.0; upstream.len()];
    if dist.support.is_empty() {
        return Ok(out);
    }
    let mean = dist.support.iter().map(|&i| upstream[i]).sum::<f64>() / dist.support.len() as f64;
    for &i in &dist.support {
        out[i] = upstream[i] - mean;
    }
    Ok(out)
}

/// 1.5-entmax via bisection on the threshold.
pub fn entmax15(z: &[f64]) -> Result<SparseDist, TensorError> {
    validate(z)?;
    let half: Vec<f64> = z.iter().map(|v| v / 2.0).collect();
    let max = half.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = |tau: f64| -> f64 {
        half.iter().map(|&v| (v - tau).max(0.0)).map(|p| p * p).sum::<f64>()
    };
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..ENTMAX_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = lo;
    let mut probs: Vec<f64> = half.iter().map(|&v| (v - tau).max(0.0).powi(2)).collect();
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > ENTMAX_SUM_TOL {
        return Err(TensorError::Numeric(format!(
            "entmax bisection did not converge: mass {total}"
        )));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(SparseDist { support: support_of(&probs), probs, threshold_tau: tau })
}

/// With `d_i = sqrt(p_i)`: `d ⊙ u − d · (Σ d⊙u / Σ d)`.
pub fn entmax15_jvp(dist: &SparseDist, upstream: &[f64]) -> Result<Vec<f64>, TensorError> {
    check_len(dist, upstream)?;
    let d: Vec<f64> = dist.probs.iter().map(|p| p.sqrt()).collect();
    let sd: f64 = d.iter().sum();
    if sd == 0.0 {
        return Ok(vec![0.0; upstream.len()]);
    }
    let q = d.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>() / sd;
    Ok(d.iter().zip(upstream).map(|(di, ui)| di * ui - di * q).collect())
}

/// Index of the largest finite entry, lowest index on ties.
pub fn argmax(z: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in z.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v > z[b]) {
            best = Some(i);
        }
    }
    best
}
