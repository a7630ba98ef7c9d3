//! Sparse multi-head attention and expert routing.
//!
//! Per query, every candidate key is scored `q·k/√d_head + bias`, the
//! `k_top` best are kept, and the configured [`Normalizer`] turns the kept
//! scores into weights (restrict, then normalize). Tokens are then routed to
//! `e` of `E` feed-forward experts by a bias-free linear router.

use crate::autodiff::linalg::{axpy, dot};
use crate::autodiff::{GradSink, NodeId, Tape, Var};
use crate::error::TensorError;
use crate::sparse::{Normalizer, SparseDist};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Keys kept per query. `usize::MAX` keeps every key.
    pub k_top: usize,
    pub normalizer: Normalizer,
    pub experts: usize,
    pub active_experts: usize,
    pub router_temp: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TensorError::Contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.k_top < 1 {
            return Err(TensorError::Contract("k_top must be at least 1".into()));
        }
        if self.active_experts < 1 || self.active_experts > self.experts {
            return Err(TensorError::Contract(format!(
                "need 1 <= e <= E, got e={} E={}",
                self.active_experts, self.experts
            )));
        }
        if !(self.router_temp > 0.0) {
            return Err(TensorError::Contract("router temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which keys each query attends to and which experts each token uses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingDecision {
    /// `I_i` per query: ascending key indices, `|I_i| = min(k_top, n_keys)`.
    pub key_sets: Vec<Vec<usize>>,
    /// Chosen experts per token, ascending.
    pub expert_sets: Vec<Vec<usize>>,
    /// Renormalized gate weight for each entry of `expert_sets`.
    pub expert_gates: Vec<Vec<f64>>,
}

/// Ordering used for every top-k in this crate: larger value first, then
/// lower index. Masked (`-inf`) entries are never selected.
fn top_k_of(values: &[f64], candidates: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.filter(|&j| values[j] != f64::NEG_INFINITY).collect();
    if idx.len() > k {
        let cmp = |a: &usize, b: &usize| {
            values[*b].partial_cmp(&values[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Indices of the `k_top` largest scores in each row of `scores`.
pub fn select_topk(scores: &Tensor, k_top: usize) -> Result<Vec<Vec<usize>>, TensorError> {
    if k_top < 1 {
        return Err(TensorError::Contract("k_top must be at least 1".into()));
    }
    if scores.shape().len() != 2 {
        return Err(TensorError::Contract("select_topk expects a 2-D score matrix".into()));
    }
    if scores.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::Numeric("select_topk: NaN score".into()));
    }
    let cols = scores.cols();
    Ok((0..scores.rows()).map(|i| top_k_of(scores.row(i), 0..cols, k_top)).collect())
}

/// Additive bias on the first `cols` keys of every query, row-major `n_q × cols`.
#[derive(Clone, Copy, Debug)]
pub struct KeyBias<'a> {
    pub values: &'a [f64],
    pub cols: usize,
}

/// Per-call attention settings.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPlan<'a> {
    pub k_top: usize,
    pub normalizer: Normalizer,
    /// Restricts scoring to these keys per query (the bucketed path).
    pub candidates: Option<&'a [Vec<usize>]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadShape {
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub d_head: usize,
}

/// Saved state of one (head, query) row.
#[derive(Clone, Debug)]
pub struct RowRecord {
    pub keys: Vec<usize>,
    pub dist: Option<SparseDist>,
}

impl RowRecord {
    /// Keys receiving strictly positive weight.
    pub fn support(&self) -> Vec<usize> {
        match &self.dist {
            Some(d) => d.support.iter().map(|&s| self.keys[s]).collect(),
            None => Vec::new(),
        }
    }
}

pub struct KernelOutput {
    /// `heads × n_q × d_head`
    pub out: Vec<f64>,
    /// Row records indexed `head * n_q + query`.
    pub rows: Vec<RowRecord>,
}

/// Forward attention over pre-projected, head-split `q`, `k`, `v`.
pub fn attention_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    shape: HeadShape,
    bias: Option<KeyBias<'_>>,
    plan: &AttentionPlan<'_>,
) -> Result<KernelOutput, TensorError> {
    let HeadShape { heads, n_q, n_k, d_head: dh } = shape;
    if plan.k_top < 1 {
        return Err(TensorError::Contract("k_top must be at least 1".into()));
    }
    if let Some(b) = bias {
        if b.cols > n_k || b.values.len() != n_q * b.cols {
            return Err(TensorError::ShapeMismatch {
                op: "attention bias",
                left: vec![n_q, n_k],
                right: vec![b.values.len() / b.cols.max(1), b.cols],
            });
        }
    }
    if let Some(c) = plan.candidates {
        if c.len() != n_q || c.iter().flatten().any(|&j| j >= n_k) {
            return Err(TensorError::Contract("candidate sets do not match the keys".into()));
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; heads * n_q * dh];
    let mut rows = Vec::with_capacity(heads * n_q);
    let mut scores = vec![f64::NEG_INFINITY; n_k];
    for h in 0..heads {
        let kh = &k[h * n_k * dh..(h + 1) * n_k * dh];
        let vh = &v[h * n_k * dh..(h + 1) * n_k * dh];
        for i in 0..n_q {
            let qi = &q[(h * n_q + i) * dh..(h * n_q + i + 1) * dh];
            let score = |j: usize| {
                let mut s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                if let Some(b) = bias {
                    if j < b.cols {
                        s += b.values[i * b.cols + j];
                    }
                }
                s
            };
            let keys = match plan.candidates {
                Some(c) => {
                    for &j in &c[i] {
                        scores[j] = score(j);
                    }
                    let kept = top_k_of(&scores, c[i].iter().copied(), plan.k_top);
                    let kept: Vec<(usize, f64)> = kept.into_iter().map(|j| (j, scores[j])).collect();
                    for &j in &c[i] {
                        scores[j] = f64::NEG_INFINITY;
                    }
                    kept
                }
                None => {
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = score(j);
                    }
                    let kept = top_k_of(&scores, 0..n_k, plan.k_top);
                    kept.into_iter().map(|j| (j, scores[j])).collect()
                }
            };
            if keys.iter().any(|(_, s)| s.is_nan()) {
                return Err(TensorError::Numeric("attention score is NaN".into()));
            }
            let (idx, sel): (Vec<usize>, Vec<f64>) = keys.into_iter().unzip();
            if idx.is_empty() {
                rows.push(RowRecord { keys: idx, dist: None });
                continue;
            }
            let dist = plan.normalizer.apply(&sel)?;
            let o = &mut out[(h * n_q + i) * dh..(h * n_q + i + 1) * dh];
            for &s in &dist.support {
                axpy(dist.probs[s], &vh[idx[s] * dh..(idx[s] + 1) * dh], o);
            }
            rows.push(RowRecord { keys: idx, dist: Some(dist) });
        }
    }
    Ok(KernelOutput { out, rows })
}

/// Gradients of [`attention_kernel`] given the upstream `g` on its output.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    shape: HeadShape,
    normalizer: Normalizer,
    rows: &[RowRecord],
    g: &[f64],
    mut gq: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
    mut gv: Option<&mut [f64]>,
    mut gbias: Option<(&mut [f64], usize)>,
) {
    let HeadShape { heads, n_q, n_k, d_head: dh } = shape;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        for i in 0..n_q {
            let rec = &rows[h * n_q + i];
            let Some(dist) = &rec.dist else { continue };
            let gi = &g[(h * n_q + i) * dh..(h * n_q + i + 1) * dh];
            let qi_off = (h * n_q + i) * dh;
            let dw: Vec<f64> = rec
                .keys
                .iter()
                .map(|&j| dot(gi, &v[(h * n_k + j) * dh..(h * n_k + j + 1) * dh]))
                .collect();
            let ds = normalizer.jvp(dist, &dw).expect("row lengths agree");
            for (s, &j) in rec.keys.iter().enumerate() {
                let koff = (h * n_k + j) * dh;
                if let Some(gv) = gv.as_deref_mut() {
                    if dist.probs[s] != 0.0 {
                        axpy(dist.probs[s], gi, &mut gv[koff..koff + dh]);
                    }
                }
                if ds[s] == 0.0 {
                    continue;
                }
                if let Some(gq) = gq.as_deref_mut() {
                    axpy(ds[s] * scale, &k[koff..koff + dh], &mut gq[qi_off..qi_off + dh]);
                }
                if let Some(gk) = gk.as_deref_mut() {
                    axpy(ds[s] * scale, &q[qi_off..qi_off + dh], &mut gk[koff..koff + dh]);
                }
                if let Some((gb, cols)) = gbias.as_mut() {
                    if j < *cols {
                        gb[i * *cols + j] += ds[s];
                    }
                }
            }
        }
    }
}

/// What one attention call selected, for tracing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionStats {
    /// `[head][query]` → keys with positive weight.
    pub supports: Vec<Vec<Vec<usize>>>,
    /// `[head][query]` → selected key set `I_i`.
    pub key_sets: Vec<Vec<Vec<usize>>>,
    /// (head, query) rows where no key could be attended; output is zero.
    pub empty_rows: Vec<(usize, usize)>,
}

/// Tape operation over head-split `q [h×n_q×dh]`, `k`/`v [h×n_k×dh]` and an
/// optional bias `[n_q × cols]` on the first `cols` keys.
pub fn sparse_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    bias: Option<Var<'t>>,
    plan: &AttentionPlan<'_>,
) -> Result<(Var<'t>, AttentionStats), TensorError> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    let mismatch = || TensorError::ShapeMismatch { op: "sparse_attention", left: sq.clone(), right: sk.clone() };
    let ([hq, n_q, dq], [hk, n_k, dk]) = (&sq[..], &sk[..]) else {
        return Err(mismatch());
    };
    if hq != hk || dq != dk || sv != sk {
        return Err(mismatch());
    }
    let shape = HeadShape { heads: *hq, n_q: *n_q, n_k: *n_k, d_head: *dq };
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let bias_val = bias.map(|b| (b.value(), b.shape()));
    let key_bias = match &bias_val {
        Some((vals, s)) => {
            let [rows, cols] = s[..] else { return Err(mismatch()) };
            if rows != shape.n_q {
                return Err(mismatch());
            }
            Some(KeyBias { values: vals.as_slice(), cols })
        }
        None => None,
    };
    let kernel = attention_kernel(&qv, &kv, &vv, shape, key_bias, plan)?;
    let stats = stats_of(&kernel.rows, shape);
    let bias_cols = key_bias.map_or(0, |b| b.cols);
    let bias_id: Option<NodeId> = bias.map(|b| b.id());
    let (idq, idk, idv) = (q.id(), k.id(), v.id());
    let normalizer = plan.normalizer;
    let rows = kernel.rows;
    let mut inputs = vec![q, k, v];
    inputs.extend(bias);
    let tape: &Tape = q.tape();
    let out = tape.record(vec![shape.heads, shape.n_q, shape.d_head], kernel.out, &inputs, move |g, sink: &mut GradSink<'_>| {
        let mut gq = sink.slot(idq).map(|s| s.to_vec());
        let mut gk = sink.slot(idk).map(|s| s.to_vec());
        let mut gv = sink.slot(idv).map(|s| s.to_vec());
        let mut gb = bias_id.and_then(|id| sink.slot(id)).map(|s| s.to_vec());
        attention_backward(
            &qv,
            &kv,
            &vv,
            shape,
            normalizer,
            &rows,
            g,
            gq.as_deref_mut(),
            gk.as_deref_mut(),
            gv.as_deref_mut(),
            gb.as_deref_mut().map(|b| (b, bias_cols)),
        );
        for (id, buf) in [(Some(idq), gq), (Some(idk), gk), (Some(idv), gv), (bias_id, gb)] {
            if let (Some(id), Some(buf)) = (id, buf) {
                if let Some(slot) = sink.slot(id) {
                    slot.copy_from_slice(&buf);
                }
            }
        }
    });
    Ok((out, stats))
}

fn stats_of(rows: &[RowRecord], shape: HeadShape) -> AttentionStats {
    let mut stats = AttentionStats::default();
    for h in 0..shape.heads {
        let mut sup = Vec::with_capacity(shape.n_q);
        let mut sets = Vec::with_capacity(shape.n_q);
        for i in 0..shape.n_q {
            let rec = &rows[h * shape.n_q + i];
            if rec.dist.is_none() {
                stats.empty_rows.push((h, i));
            }
            sup.push(rec.support());
            sets.push(rec.keys.clone());
        }
        stats.supports.push(sup);
        stats.key_sets.push(sets);
    }
    stats
}

/// Learned projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

/// Projects queries from `h [n×d]` and keys/values from `kv [n_k×d]`, split
/// per head: each `[heads × rows × d/heads]`.
pub fn project_qkv<'t>(
    h: Var<'t>,
    kv: Var<'t>,
    params: &AttentionParams<'t>,
    n_heads: usize,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), TensorError> {
    let q = h.matmul(params.wq)?.add(params.bq)?.split_heads(n_heads)?;
    let k = kv.matmul(params.wk)?.add(params.bk)?.split_heads(n_heads)?;
    let v = kv.matmul(params.wv)?.add(params.bv)?.split_heads(n_heads)?;
    Ok((q, k, v))
}

/// Full multi-head attention: projection, sparse core, head merge, output
/// projection.
pub fn multi_head_attention<'t>(
    h: Var<'t>,
    kv: Var<'t>,
    bias: Option<Var<'t>>,
    params: &AttentionParams<'t>,
    config: &AttentionConfig,
    candidates: Option<&[Vec<usize>]>,
) -> Result<(Var<'t>, AttentionStats), TensorError> {
    let (q, k, v) = project_qkv(h, kv, params, config.n_heads)?;
    let plan = AttentionPlan { k_top: config.k_top, normalizer: config.normalizer, candidates };
    let (core, stats) = sparse_attention(q, k, v, bias, &plan)?;
    let out = core.merge_heads()?.matmul(params.wo)?.add(params.bo)?;
    Ok((out, stats))
}

/// Router output for one layer call.
#[derive(Clone, Debug)]
pub struct ExpertRouting<'t> {
    /// Full softmax over experts, `[n × E]`.
    pub probs: Var<'t>,
    /// Renormalized gates, zero off the chosen experts, `[n × E]`.
    pub gates: Var<'t>,
    pub expert_sets: Vec<Vec<usize>>,
}

impl ExpertRouting<'_> {
    pub fn decision(&self) -> RoutingDecision {
        let g = self.gates.value();
        let e_total = self.gates.shape()[1];
        let expert_gates = self
            .expert_sets
            .iter()
            .enumerate()
            .map(|(i, set)| set.iter().map(|&j| g[i * e_total + j]).collect())
            .collect();
        RoutingDecision {
            key_sets: Vec::new(),
            expert_sets: self.expert_sets.clone(),
            expert_gates,
        }
    }
}

/// Softmax router with top-`e` truncation and renormalization.
pub fn route_experts<'t>(
    h: Var<'t>,
    router: Var<'t>,
    config: &AttentionConfig,
) -> Result<ExpertRouting<'t>, TensorError> {
    config.validate()?;
    let logits = h.matmul(router)?.scale(1.0 / config.router_temp);
    let probs = logits.softmax_rows()?;
    let n_exp = config.experts;
    if probs.shape()[1] != n_exp {
        return Err(TensorError::ShapeMismatch {
            op: "route_experts",
            left: probs.shape(),
            right: vec![h.shape()[0], n_exp],
        });
    }
    let p = probs.value();
    let n = p.len() / n_exp;
    let expert_sets: Vec<Vec<usize>> = (0..n)
        .map(|i| top_k_of(&p[i * n_exp..(i + 1) * n_exp], 0..n_exp, config.active_experts))
        .collect();
    let gates = renormalize_selected(probs, &expert_sets)?;
    Ok(ExpertRouting { probs, gates, expert_sets })
}

/// `gate_ij = p_ij / Σ_{l∈S_i} p_il` for `j ∈ S_i`, else 0.
fn renormalize_selected<'t>(
    probs: Var<'t>,
    sets: &[Vec<usize>],
) -> Result<Var<'t>, TensorError> {
    let shape = probs.shape();
    let cols = shape[1];
    let p = probs.value();
    let mut out = vec![0.0; p.len()];
    let mut totals = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let total: f64 = set.iter().map(|&j| p[i * cols + j]).sum();
        for &j in set {
            out[i * cols + j] = p[i * cols + j] / total;
        }
        totals.push(total);
    }
    let sets = sets.to_vec();
    let id = probs.id();
    Ok(probs.tape().record(shape, out, &[probs], move |g, sink| {
        let Some(gp) = sink.slot(id) else { return };
        for (i, set) in sets.iter().enumerate() {
            let s = totals[i];
            let weighted: f64 = set.iter().map(|&l| g[i * cols + l] * p[i * cols + l]).sum::<f64>() / s;
            for &j in set {
                gp[i * cols + j] += (g[i * cols + j] - weighted) / s;
            }
        }
    }))
}

/// Parameters of one feed-forward expert: `linear → gelu → linear`.
#[derive(Clone, Copy, Debug)]
pub struct ExpertParams<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> ExpertParams<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(self.w1)?.add(self.b1)?.gelu().matmul(self.w2)?.add(self.b2)
    }
}

/// `out_i = Σ_{j∈experts(i)} gate_ij · FFN_j(h_i)`. Experts that receive no
/// token are never evaluated.
pub fn moe_ffn<'t>(
    h: Var<'t>,
    routing: &ExpertRouting<'t>,
    experts: &[ExpertParams<'t>],
) -> Result<Var<'t>, TensorError> {
    let shape = h.shape();
    let [n, d] = shape[..] else {
        return Err(TensorError::Contract("moe_ffn expects [n, d]".into()));
    };
    if routing.expert_sets.len() != n {
        return Err(TensorError::Contract("routing does not cover every token".into()));
    }
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); experts.len()];
    for (i, set) in routing.expert_sets.iter().enumerate() {
        for &j in set {
            tokens
                .get_mut(j)
                .ok_or_else(|| TensorError::Contract(format!("expert {j} has no parameters")))?
                .push(i);
        }
    }
    let mut outputs = Vec::new();
    for (j, toks) in tokens.into_iter().enumerate() {
        if toks.is_empty() {
            continue;
        }
        let y = experts[j].apply(h.gather_rows(&toks)?)?;
        outputs.push((j, y, toks));
    }
    mix_experts(routing.gates, &outputs, n, d)
}

fn mix_experts<'t>(
    gates: Var<'t>,
    outputs: &[(usize, Var<'t>, Vec<usize>)],
    n: usize,
    d: usize,
) -> Result<Var<'t>, TensorError> {
    let n_exp = gates.shape()[1];
    let gv = gates.value();
    let mut out = vec![0.0; n * d];
    let mut saved = Vec::with_capacity(outputs.len());
    for (j, y, toks) in outputs {
        let yv = y.value();
        for (r, &i) in toks.iter().enumerate() {
            axpy(gv[i * n_exp + j], &yv[r * d..(r + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
        saved.push((*j, y.id(), yv, toks.clone()));
    }
    let mut inputs = vec![gates];
    inputs.extend(outputs.iter().map(|(_, y, _)| *y));
    let gid = gates.id();
    Ok(gates.tape().record(vec![n, d], out, &inputs, move |g, sink| {
        if let Some(gg) = sink.slot(gid) {
            for (j, _, yv, toks) in &saved {
                for (r, &i) in toks.iter().enumerate() {
                    gg[i * n_exp + j] += dot(&yv[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
        }
        for (j, yid, _, toks) in &saved {
            if let Some(gy) = sink.slot(*yid) {
                for (r, &i) in toks.iter().enumerate() {
                    axpy(gv[i * n_exp + j], &g[i * d..(i + 1) * d], &mut gy[r * d..(r + 1) * d]);
                }
            }
        }
    }))
}

/// `E · Σ_j f_j · P_j`, with `f_j` the share of routed (token, expert)
/// assignments that went to `j` and `P_j` the mean router probability of `j`.
/// Equals 1 under perfectly uniform routing and `E` when one expert takes all.
pub fn load_balance_loss<'t>(routing: &ExpertRouting<'t>) -> Result<Var<'t>, TensorError> {
    let n_exp = routing.probs.shape()[1];
    let mut counts = vec![0.0; n_exp];
    let mut total = 0.0;
    for set in &routing.expert_sets {
        for &j in set {
            counts[j] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    let f = routing.probs.tape().constant(Tensor::new(vec![n_exp], counts)?);
    Ok(routing.probs.mean_rows().mul(f)?.sum().scale(n_exp as f64))
}
