//! Content-only token graph.
//!
//! Edge scores are a scaled dot product of two dedicated projections of the
//! token states; no term depends on token position. The scores bias
//! attention, their drift across iterations is penalized, and a 1-D sort of
//! token content yields the bucketed candidate sets of the sub-quadratic
//! attention path.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Var;
use crate::error::{Error, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct StructureParams<'t> {
    /// `d × d_s`
    pub wq: Var<'t>,
    /// `d × d_s`
    pub wk: Var<'t>,
}

/// Snapshot of one iteration's graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGraph {
    pub iteration: usize,
    /// Dense `n × n` edge scores.
    pub scores: Tensor,
    /// `(i, j)` pairs kept by the per-row top-k of the scores.
    pub selected: Vec<(usize, usize)>,
}

impl LatentGraph {
    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    /// Snapshot keeping the `k_select` best edges of every row.
    pub fn from_scores(iteration: usize, scores: Tensor, k_select: usize) -> Result<Self, TensorError> {
        let selected = crate::attention::select_topk(&scores, k_select.max(1))?
            .into_iter()
            .enumerate()
            .flat_map(|(i, js)| js.into_iter().map(move |j| (i, j)))
            .collect();
        Ok(Self { iteration, scores, selected })
    }
}

/// Differentiable edge scores `e_ij = (W_q h_i · W_k h_j)/√d_s`, `[n × n]`.
pub fn edge_scores<'t>(h: Var<'t>, params: &StructureParams<'t>) -> Result<Var<'t>, TensorError> {
    let ds = params.wq.shape()[1] as f64;
    let q = h.matmul(params.wq)?;
    let k = h.matmul(params.wk)?;
    Ok(q.matmul(k.transpose()?)?.scale(1.0 / ds.sqrt()))
}

/// Edge scores plus a graph snapshot whose edges are the `k_select` best
/// per row.
pub fn score_edges<'t>(
    h: Var<'t>,
    params: &StructureParams<'t>,
    iteration: usize,
    k_select: usize,
) -> Result<(Var<'t>, LatentGraph), TensorError> {
    let e = edge_scores(h, params)?;
    let graph = LatentGraph::from_scores(iteration, e.to_tensor(), k_select)?;
    Ok((e, graph))
}

/// `Σ_{t≥2} Σ_ij (e_ij^(t) − e_ij^(t−1))²`. `None` for fewer than two
/// graphs, where no drift exists.
pub fn struct_loss<'t>(graphs: &[Var<'t>]) -> Result<Option<Var<'t>>, TensorError> {
    let mut total: Option<Var<'t>> = None;
    for pair in graphs.windows(2) {
        if pair[0].shape() != pair[1].shape() {
            return Err(TensorError::Contract(format!(
                "graphs over different token counts: {:?} vs {:?}",
                pair[0].shape(),
                pair[1].shape()
            )));
        }
        let drift = pair[1].sub(pair[0])?.square().sum();
        total = Some(match total {
            Some(t) => t.add(drift)?,
            None => drift,
        });
    }
    Ok(total)
}

/// Mean successive-iteration drift `Σ(e^(t) − e^(t−1))² / n²` over a trace.
pub fn mean_drift(graphs: &[LatentGraph]) -> f64 {
    if graphs.len() < 2 {
        return 0.0;
    }
    let total: f64 = graphs
        .windows(2)
        .map(|p| {
            let n = p[1].n() as f64;
            p[1].scores.data().iter().zip(p[0].scores.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / (n * n)
        })
        .sum();
    total / (graphs.len() - 1) as f64
}

/// Additive attention bias `λ · e`.
pub fn graph_bias<'t>(scores: Var<'t>, lambda: f64) -> Var<'t> {
    scores.scale(lambda)
}

/// Bucketed candidate keys: tokens are sorted by `h · direction`, cut into
/// consecutive buckets of `bucket_size`, and each query gets its own bucket
/// and both neighbours. Sorting has no gradient, so `direction` is a fixed
/// parameter rather than a trained one.
pub fn bucket_candidates(
    h: &Tensor,
    direction: &[f64],
    bucket_size: usize,
) -> Result<Vec<Vec<usize>>, TensorError> {
    if bucket_size == 0 {
        return Err(TensorError::Contract("bucket size must be positive".into()));
    }
    if h.cols() != direction.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bucket_candidates",
            left: h.shape().to_vec(),
            right: vec![direction.len()],
        });
    }
    let n = h.rows();
    let proj: Vec<f64> = (0..n).map(|i| crate::autodiff::linalg::dot(h.row(i), direction)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let buckets: Vec<&[usize]> = order.chunks(bucket_size).collect();
    let mut bucket_of = vec![0; n];
    for (b, members) in buckets.iter().enumerate() {
        for &i in members.iter() {
            bucket_of[i] = b;
        }
    }
    let mut cache: Vec<Option<Vec<usize>>> = vec![None; buckets.len()];
    let mut out = Vec::with_capacity(n);
    for &b in &bucket_of {
        let set = cache[b].get_or_insert_with(|| {
            let lo = b.saturating_sub(1);
            let hi = (b + 1).min(buckets.len() - 1);
            let mut s: Vec<usize> = buckets[lo..=hi].iter().flat_map(|m| m.iter().copied()).collect();
            s.sort_unstable();
            s
        });
        out.push(set.clone());
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c.is_control() => {}
            c => out.push(c),
        }
    }
    out
}

/// DOT text with one `subgraph cluster_t` per iteration. Node labels are
/// `"index: text"`; edges carry `weight` = the edge score.
pub fn graph_to_dot(graphs: &[LatentGraph], labels: &[String]) -> String {
    let mut s = String::from("digraph latent {\n");
    for g in graphs {
        let t = g.iteration;
        let _ = writeln!(s, "  subgraph cluster_{t} {{");
        let _ = writeln!(s, "    label=\"iteration {t}\";");
        for i in 0..g.n() {
            let text = labels.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(s, "    t{t}_n{i} [label=\"{}\"];", escape(&format!("{i}: {text}")));
        }
        for &(i, j) in &g.selected {
            let w = g.scores.at(i, j);
            let _ = writeln!(s, "    t{t}_n{i} -> t{t}_n{j} [weight=\"{w}\"];");
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    s
}

pub fn export_graph(graphs: &[LatentGraph], labels: &[String], path: &Path) -> Result<(), Error> {
    if graphs.is_empty() {
        return Err(Error::Config("graph export needs at least one iteration".into()));
    }
    std::fs::write(path, graph_to_dot(graphs, labels)).map_err(|e| Error::io(path, e))
}
