//! The recurrent model: one shared block applied `K` times.
//!
//! Each iteration normalizes the token states, scores the token graph,
//! updates memory, then runs the block: sparse attention over the current
//! tokens plus memory rows (graph scores as bias) followed by the routed
//! expert feed-forward, both as pre-norm residuals. Logits use the tied
//! embedding matrix. No positional signal is added unless structure is
//! ablated.

mod config;
mod params;

pub use config::{ablate, Module, ModelConfig, MODEL_KEYS};
pub(crate) use config::parse_field;
pub use params::{BoundParams, ModelParams, NormParams, ParamStore};

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    load_balance_loss, moe_ffn, multi_head_attention, route_experts, AttentionConfig,
    AttentionStats,
};
use crate::autodiff::{concat_rows, Var, LAYER_NORM_EPS};
use crate::error::{Error, TensorError};
use crate::memory::{memory_kv, update_memory, GateMode, HierMemory};
use crate::structure::{edge_scores, graph_bias, struct_loss, LatentGraph};
use crate::tensor::Tensor;

/// What one iteration did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationTrace {
    /// Attention supports, `[head][query]`.
    pub attention: AttentionStats,
    /// Per-slot memory gate; `None` on the initializing update or without memory.
    pub alpha: Option<Vec<f64>>,
    /// `m × n` pooling weights.
    pub pool_weights: Option<Tensor>,
    pub expert_sets: Vec<Vec<usize>>,
    pub expert_gates: Vec<Vec<f64>>,
    pub graph: Option<LatentGraph>,
    /// Frobenius norm of the token states entering the iteration.
    pub hidden_norm: f64,
}

/// Per-iteration record of a forward pass; one entry per iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub iterations: Vec<IterationTrace>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn graphs(&self) -> Vec<LatentGraph> {
        self.iterations.iter().filter_map(|t| t.graph.clone()).collect()
    }

    /// `(iteration, head, query)` rows whose attention was empty.
    pub fn empty_rows(&self) -> Vec<(usize, usize, usize)> {
        self.iterations
            .iter()
            .enumerate()
            .flat_map(|(t, it)| it.attention.empty_rows.iter().map(move |&(h, q)| (t, h, q)))
            .collect()
    }
}

/// Forward-pass switches.
#[derive(Debug, Default)]
pub struct ForwardOptions<'r> {
    /// Fill [`StepTrace`] with supports, gates and graphs.
    pub trace: bool,
    pub gate_mode: GateMode,
    /// Source of dropout masks; dropout is off without it.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    /// Keep the gradient path through the token cache (gradient checking).
    pub attach_cache: bool,
}

impl ForwardOptions<'_> {
    pub fn traced() -> Self {
        Self { trace: true, ..Self::default() }
    }
}

pub struct ForwardOutput<'t> {
    /// `n × vocab`
    pub logits: Var<'t>,
    /// Final token states `H^(K)`, before the output norm.
    pub hidden: Var<'t>,
    pub trace: StepTrace,
    /// Edge-score drift across iterations; `None` without structure or with `K = 1`.
    pub struct_loss: Option<Var<'t>>,
    /// Router balance penalty averaged over iterations.
    pub balance_loss: Var<'t>,
}

fn check_tokens(tokens: &[usize], config: &ModelConfig) -> Result<(), Error> {
    if tokens.is_empty() {
        return Err(TensorError::Contract("empty token sequence".into()).into());
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(TensorError::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        ))
        .into());
    }
    if config.uses_positions() && tokens.len() > config.max_positions {
        return Err(TensorError::Contract(format!(
            "sequence of {} exceeds max_positions {}",
            tokens.len(),
            config.max_positions
        ))
        .into());
    }
    Ok(())
}

/// Output of one application of the shared block.
pub struct BlockOutput<'t> {
    pub hidden: Var<'t>,
    pub attention: AttentionStats,
    pub routing: crate::attention::ExpertRouting<'t>,
}

/// `h₁ = h + Attn(LN₁h; keys = LN₁h ‖ memory; bias)`, `h₂ = h₁ + MoE(LN₂h₁)`.
/// `x` is `LN₁h`, already computed by the caller for graph and memory.
#[allow(clippy::too_many_arguments)]
pub fn block<'t>(
    h: Var<'t>,
    x: Var<'t>,
    memory_rows: Option<Var<'t>>,
    bias: Option<Var<'t>>,
    params: &ModelParams<'t>,
    attn: &AttentionConfig,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BlockOutput<'t>, Error> {
    let kv = match memory_rows {
        Some(extra) => concat_rows(x.tape(), &[x, extra])?,
        None => x,
    };
    let (mut a, attention) = multi_head_attention(x, kv, bias, &params.attn, attn, None)?;
    let mut rng = rng;
    if let Some(r) = rng.as_deref_mut() {
        a = a.dropout(dropout, r);
    }
    let h1 = h.add(a)?;
    let y = h1.layer_norm(params.ln2.gain, params.ln2.bias, LAYER_NORM_EPS)?;
    let routing = route_experts(y, params.router, attn)?;
    let mut f = moe_ffn(y, &routing, &params.experts)?;
    if let Some(r) = rng {
        f = f.dropout(dropout, r);
    }
    Ok(BlockOutput { hidden: h1.add(f)?, attention, routing })
}

/// Runs the `K` iterations over `tokens`.
pub fn forward<'t>(
    tokens: &[usize],
    params: &ModelParams<'t>,
    config: &ModelConfig,
    opts: &mut ForwardOptions<'_>,
) -> Result<ForwardOutput<'t>, Error> {
    check_tokens(tokens, config)?;
    let tape = params.embed.tape();
    let n = tokens.len();
    let mut h = params.embed.gather_rows(tokens)?;
    if let Some(pos) = params.pos_embed {
        let idx: Vec<usize> = (0..n).collect();
        h = h.add(pos.gather_rows(&idx)?)?;
    }
    let attn = config.attention();
    let lambda_bias = config.effective_lambda_bias();
    let mut memory = if opts.attach_cache {
        HierMemory::attached(config.memory_slots)
    } else {
        HierMemory::new(config.memory_slots)
    };
    let mut scores = Vec::with_capacity(config.iterations);
    let mut balance: Option<Var<'t>> = None;
    let mut trace = StepTrace::default();
    for t in 0..config.iterations {
        let hidden_norm = if opts.trace { h.value().iter().map(|v| v * v).sum::<f64>().sqrt() } else { 0.0 };
        let x = h.layer_norm(params.ln1.gain, params.ln1.bias, LAYER_NORM_EPS)?;

        let mut graph = None;
        let mut bias = None;
        if let Some(sp) = &params.structure {
            let e = edge_scores(x, sp)?;
            if opts.trace {
                graph = Some(LatentGraph::from_scores(t, e.to_tensor(), config.k_top.min(n))?);
            }
            if lambda_bias != 0.0 {
                bias = Some(graph_bias(e, lambda_bias));
            }
            scores.push(e);
        }

        let mut memory_rows = None;
        let mut mem_update = None;
        if let Some(mp) = &params.memory {
            let (next, upd) = update_memory(x, &memory, mp, opts.gate_mode)?;
            memory = next;
            memory_rows = memory_kv(&memory)?;
            mem_update = Some(upd);
        }

        let dropout = if config.dropout_rate > 0.0 { opts.dropout_rng.as_deref_mut() } else { None };
        let out = block(h, x, memory_rows, bias, params, &attn, config.dropout_rate, dropout)?;
        let lb = load_balance_loss(&out.routing)?;
        balance = Some(match balance {
            Some(b) => b.add(lb)?,
            None => lb,
        });
        if opts.trace {
            let decision = out.routing.decision();
            trace.iterations.push(IterationTrace {
                attention: out.attention,
                alpha: mem_update.as_ref().and_then(|u| u.alpha.clone()),
                pool_weights: mem_update.map(|u| u.pool_weights),
                expert_sets: decision.expert_sets,
                expert_gates: decision.expert_gates,
                graph,
                hidden_norm,
            });
        } else {
            trace.iterations.push(IterationTrace {
                attention: AttentionStats { empty_rows: out.attention.empty_rows, ..Default::default() },
                ..Default::default()
            });
        }
        h = out.hidden;
    }
    let z = h.layer_norm(params.ln_f.gain, params.ln_f.bias, LAYER_NORM_EPS)?;
    let logits = z.matmul(params.embed.transpose()?)?;
    let balance = balance
        .map(|b| b.scale(1.0 / config.iterations as f64))
        .unwrap_or_else(|| tape.scalar(0.0));
    Ok(ForwardOutput { logits, hidden: h, trace, struct_loss: struct_loss(&scores)?, balance_loss: balance })
}

/// Loss terms of one sequence.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub cross_entropy: f64,
    pub structure: f64,
    pub balance: f64,
}

/// Mean token cross-entropy plus the weighted drift and balance penalties.
/// Zero-weighted terms are left off the tape.
pub fn loss<'t>(
    out: &ForwardOutput<'t>,
    targets: &[Option<usize>],
    config: &ModelConfig,
) -> Result<LossParts<'t>, Error> {
    let ce = out.logits.cross_entropy(targets)?;
    let mut total = ce;
    let lambda_struct = config.effective_lambda_struct();
    let structure = out.struct_loss.map_or(0.0, |s| s.item());
    if lambda_struct > 0.0 {
        if let Some(s) = out.struct_loss {
            total = total.add(s.scale(lambda_struct))?;
        }
    }
    if config.load_balance_coeff > 0.0 {
        total = total.add(out.balance_loss.scale(config.load_balance_coeff))?;
    }
    Ok(LossParts { total, cross_entropy: ce.item(), structure, balance: out.balance_loss.item() })
}

/// Owned parameters plus their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Plain-value result of [`Model::run`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub hidden: Tensor,
    pub trace: StepTrace,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let params = ParamStore::init(&config, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Inference pass without dropout.
    pub fn run(&self, tokens: &[usize], trace: bool) -> Result<Prediction, Error> {
        let tape = crate::autodiff::Tape::new();
        let bound = self.params.bind_constants(&tape);
        let params = ModelParams::from_bound(&bound, &self.config)?;
        let mut opts = ForwardOptions { trace, ..Default::default() };
        let out = forward(tokens, &params, &self.config, &mut opts)?;
        Ok(Prediction { logits: out.logits.to_tensor(), hidden: out.hidden.to_tensor(), trace: out.trace })
    }
}
