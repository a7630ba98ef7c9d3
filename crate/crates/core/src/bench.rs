//! Attention scaling benchmark.
//!
//! `dense` scores every key and normalizes with softmax, `exact` scores every
//! key and keeps the top `k`, and `bucketed` scores only the `O(k)` candidates
//! produced by content bucketing. Times are monotonic wall-clock medians.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_kernel, AttentionPlan, HeadShape};
use crate::error::{Error, TensorError};
use crate::sparse::Normalizer;
use crate::structure::bucket_candidates;
use crate::tensor::Tensor;

pub const WARMUPS: usize = 2;
pub const MIN_TRIALS: usize = 5;
pub const BENCH_D_MODEL: usize = 64;
pub const BENCH_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Exact,
    Bucketed,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Dense, BenchMode::Exact, BenchMode::Bucketed];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(BenchMode::Dense),
            "exact" => Some(BenchMode::Exact),
            "bucketed" => Some(BenchMode::Bucketed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Dense => "dense",
            BenchMode::Exact => "exact",
            BenchMode::Bucketed => "bucketed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    pub k_top: usize,
    pub median_ms: f64,
    pub trials: usize,
}

/// Random head-split inputs for a sequence of `n` states.
struct Inputs {
    hidden: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    direction: Vec<f64>,
}

fn inputs(n: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = [BENCH_HEADS, n, BENCH_D_MODEL / BENCH_HEADS];
    Inputs {
        hidden: Tensor::randn(&[n, BENCH_D_MODEL], 1.0, &mut rng),
        q: Tensor::randn(&size, 1.0, &mut rng).into_data(),
        k: Tensor::randn(&size, 1.0, &mut rng).into_data(),
        v: Tensor::randn(&size, 1.0, &mut rng).into_data(),
        direction: Tensor::randn(&[BENCH_D_MODEL], 1.0, &mut rng).into_data(),
    }
}

fn run_once(mode: BenchMode, x: &Inputs, k_top: usize) -> Result<f64, TensorError> {
    let n = x.hidden.rows();
    let shape = HeadShape { heads: BENCH_HEADS, n_q: n, n_k: n, d_head: BENCH_D_MODEL / BENCH_HEADS };
    let out = match mode {
        BenchMode::Dense => {
            let plan = AttentionPlan { k_top: usize::MAX, normalizer: Normalizer::Softmax, candidates: None };
            attention_kernel(&x.q, &x.k, &x.v, shape, None, &plan)?
        }
        BenchMode::Exact => {
            let plan = AttentionPlan { k_top, normalizer: Normalizer::Entmax15, candidates: None };
            attention_kernel(&x.q, &x.k, &x.v, shape, None, &plan)?
        }
        BenchMode::Bucketed => {
            let cand = bucket_candidates(&x.hidden, &x.direction, k_top)?;
            let plan = AttentionPlan { k_top, normalizer: Normalizer::Entmax15, candidates: Some(&cand) };
            attention_kernel(&x.q, &x.k, &x.v, shape, None, &plan)?
        }
    };
    Ok(out.out.iter().sum())
}

/// Median wall-clock milliseconds of `trials` forward passes after
/// [`WARMUPS`] untimed ones.
pub fn time_attention(mode: BenchMode, n: usize, k_top: usize, trials: usize, seed: u64) -> Result<BenchRow, Error> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("trials: need at least {MIN_TRIALS}")));
    }
    if n == 0 || k_top == 0 {
        return Err(Error::Config("bench: n and k_top must be positive".into()));
    }
    let x = inputs(n, seed);
    let mut sink = 0.0;
    for _ in 0..WARMUPS {
        sink += run_once(mode, &x, k_top)?;
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        sink += run_once(mode, &x, k_top)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    times.sort_by(f64::total_cmp);
    let median = if trials % 2 == 1 {
        times[trials / 2]
    } else {
        0.5 * (times[trials / 2 - 1] + times[trials / 2])
    };
    Ok(BenchRow { mode, n, k_top, median_ms: median, trials })
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn fit_exponent(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn mode_exponent(rows: &[BenchRow], mode: BenchMode) -> Option<f64> {
    let pts: Vec<(usize, f64)> = rows.iter().filter(|r| r.mode == mode).map(|r| (r.n, r.median_ms)).collect();
    fit_exponent(&pts)
}

/// Times every mode at every length.
pub fn run_bench(modes: &[BenchMode], lengths: &[usize], k_top: usize, trials: usize, seed: u64) -> Result<Vec<BenchRow>, Error> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &n in lengths {
            rows.push(time_attention(mode, n, k_top, trials, seed)?);
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("mode,n,k_top,median_ms,trials\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6},{}\n", r.mode.name(), r.n, r.k_top, r.median_ms, r.trials));
    }
    s
}
