//! Finite-difference verification of every differentiable operation.
//!
//! Each case maps input tensors to an output; the checked scalar is a
//! fixed random-weighted sum of that output. Every input entry is perturbed
//! by `±h` and the central difference is compared with the reverse-mode
//! gradient. Where halving `h` changes the difference noticeably the entry
//! sits on a kink (a selection or support boundary) and is skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    load_balance_loss, moe_ffn, multi_head_attention, route_experts, sparse_attention,
    AttentionConfig, AttentionParams, AttentionPlan, ExpertParams,
};
use crate::autodiff::{concat_rows, Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, TensorError};
use crate::memory::{gated_update, pool_segment, GateMode, MemoryParams};
use crate::model::{ablate, forward, loss, ForwardOptions, ModelConfig, ModelParams, Module, ParamStore};
use crate::sparse::Normalizer;
use crate::structure::{edge_scores, struct_loss, StructureParams};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error: gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;
const KINK_TOL: f64 = 1e-4;

type Build = Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, Error>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        build: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, Error> + 'static,
    ) -> Self {
        Self { name: name.into(), inputs, build: Box::new(build) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn weighted_loss<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>, Error> {
    let w = out.tape().constant(weights.clone().reshape(out.shape())?);
    Ok(out.mul(w)?.sum())
}

fn eval_loss(case: &Case, inputs: &[Tensor], weights: &Tensor) -> Result<f64, Error> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&vars)?;
    Ok(weighted_loss(out, weights)?.item())
}

/// Checks one case; the output weights come from `seed`.
pub fn check(case: &Case, seed: u64) -> Result<OpReport, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&vars)?;
    let weights = Tensor::uniform(&[out.numel()], -1.0, 1.0, &mut rng);
    let total = weighted_loss(out, &weights)?;
    let grads = tape.backward(total)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    drop(grads);
    let mut report = OpReport { name: case.name.clone(), max_rel_err: 0.0, checked: 0, skipped: 0 };
    let mut inputs = case.inputs.clone();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = inputs[i].data()[j];
            let mut diff = |h: f64| -> Result<f64, Error> {
                inputs[i].data_mut()[j] = orig + h;
                let up = eval_loss(case, &inputs, &weights)?;
                inputs[i].data_mut()[j] = orig - h;
                let down = eval_loss(case, &inputs, &weights)?;
                inputs[i].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let n1 = diff(STEP)?;
            let n2 = diff(STEP / 2.0)?;
            if (n1 - n2).abs() > KINK_TOL * n1.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
            report.max_rel_err = report.max_rel_err.max(rel_err(a[j], n1));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Deliberately wrong backward rule (`d/dx x² = 3x`), used to show that the
/// suite catches a broken operation.
pub fn faulty_square<'t>(x: Var<'t>) -> Var<'t> {
    let v = x.value();
    let out: Vec<f64> = v.iter().map(|a| a * a).collect();
    let id = x.id();
    x.tape().record(x.shape(), out, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(id) {
            for i in 0..g.len() {
                gx[i] += g[i] * 3.0 * v[i];
            }
        }
    })
}

/// Runs the full-model case on `config` with a sequence of `n` tokens.
fn model_case(name: &str, config: ModelConfig, n: usize, seed: u64) -> Result<Case, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::init(&config, &mut rng)?;
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let targets: Vec<Option<usize>> =
        (0..n).map(|i| (i % 2 == 0).then(|| rng.random_range(0..config.vocab_size))).collect();
    let cfg = ModelConfig { load_balance_coeff: 0.05, ..config };
    Ok(Case::new(name, store.tensors().to_vec(), move |vars| {
        let bound = store.wrap(vars.to_vec())?;
        let params = ModelParams::from_bound(&bound, &cfg)?;
        let out = forward(&tokens, &params, &cfg, &mut ForwardOptions { attach_cache: true, ..Default::default() })?;
        let parts = loss(&out, &targets, &cfg)?;
        Ok(parts.total)
    }))
}

/// Gradient-check presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `d = 8`, `K = 2`.
    Tiny,
    /// `d = 16`, `K = 3`.
    Small,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" | "default" => Some(Preset::Tiny),
            "small" => Some(Preset::Small),
            _ => None,
        }
    }

    fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Small => ModelConfig {
                d_model: 16,
                n_heads: 2,
                iterations: 3,
                k_top: 5,
                memory_slots: 4,
                struct_dim: 8,
                ..ModelConfig::tiny()
            },
        }
    }
}

/// Every registered case. `faulty` adds the broken fixture op.
pub fn registry(preset: Preset, faulty: bool) -> Result<Vec<Case>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6_7AD);
    let r = &mut rng;
    let mut cases = vec![
        Case::new("add_broadcast", vec![randn(&[3, 4], r), randn(&[4], r)], |v| Ok(v[0].add(v[1])?)),
        Case::new("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], |v| Ok(v[0].sub(v[1])?)),
        Case::new("mul_broadcast", vec![randn(&[2, 3, 4], r), randn(&[3, 4], r)], |v| Ok(v[0].mul(v[1])?)),
        Case::new("matmul", vec![randn(&[3, 5], r), randn(&[5, 2], r)], |v| Ok(v[0].matmul(v[1])?)),
        Case::new("transpose", vec![randn(&[3, 5], r)], |v| Ok(v[0].transpose()?)),
        Case::new("unary_gelu", vec![randn(&[10], r)], |v| Ok(v[0].gelu())),
        Case::new("unary_sigmoid", vec![randn(&[10], r)], |v| Ok(v[0].sigmoid())),
        Case::new("unary_tanh_exp_square", vec![randn(&[10], r)], |v| {
            Ok(v[0].unary(crate::autodiff::UnaryOp::Tanh).unary(crate::autodiff::UnaryOp::Exp).square())
        }),
        Case::new("reductions", vec![randn(&[4, 3], r)], |v| {
            let t = v[0].tape();
            let m = v[0].mean_rows();
            Ok(concat_rows(t, &[m.reshape(vec![1, 3])?, v[0]])?.sum().add(v[0].mean())?)
        }),
        Case::new("layer_norm", vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], |v| {
            Ok(v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)?)
        }),
        Case::new("softmax_rows", vec![randn(&[3, 5], r)], |v| Ok(v[0].softmax_rows()?)),
        Case::new("sparsemax_rows", vec![randn(&[3, 6], r)], |v| Ok(v[0].sparse_rows(Normalizer::Sparsemax)?)),
        Case::new("entmax15_rows", vec![randn(&[3, 6], r)], |v| Ok(v[0].sparse_rows(Normalizer::Entmax15)?)),
        Case::new("gather_rows", vec![randn(&[4, 3], r)], |v| Ok(v[0].gather_rows(&[2, 0, 2, 3])?)),
        Case::new("concat_cols_rows", vec![randn(&[2, 3], r), randn(&[2, 2], r)], |v| {
            let c = v[0].concat_cols(v[1])?;
            Ok(concat_rows(v[0].tape(), &[c, c.scale(2.0)])?)
        }),
        Case::new("mul_rows", vec![randn(&[3, 4], r), randn(&[3], r)], |v| Ok(v[0].mul_rows(v[1])?)),
        Case::new("split_merge_heads", vec![randn(&[3, 4], r)], |v| {
            let s = v[0].split_heads(2)?;
            Ok(s.mul(s)?.merge_heads()?)
        }),
        Case::new("cross_entropy", vec![randn(&[4, 5], r)], |v| {
            Ok(v[0].cross_entropy(&[Some(1), None, Some(4), Some(0)])?)
        }),
    ];
    for (name, phi, k) in [
        ("sparse_attention_sparsemax", Normalizer::Sparsemax, 3),
        ("sparse_attention_entmax15", Normalizer::Entmax15, 4),
        ("sparse_attention_softmax_dense", Normalizer::Softmax, usize::MAX),
    ] {
        cases.push(Case::new(
            name,
            vec![randn(&[2, 4, 3], r), randn(&[2, 6, 3], r), randn(&[2, 6, 3], r), randn(&[4, 5], r)],
            move |v| {
                let plan = AttentionPlan { k_top: k, normalizer: phi, candidates: None };
                Ok(sparse_attention(v[0], v[1], v[2], Some(v[3]), &plan)?.0)
            },
        ));
    }
    let d = 4;
    let attn_inputs = {
        let mut t = vec![randn(&[5, d], r), randn(&[3, d], r)];
        for _ in 0..4 {
            t.push(Tensor::randn(&[d, d], 0.5, r));
            t.push(Tensor::randn(&[d], 0.5, r));
        }
        t
    };
    cases.push(Case::new("multi_head_attention", attn_inputs, move |v| {
        let p = AttentionParams { wq: v[2], bq: v[3], wk: v[4], bk: v[5], wv: v[6], bv: v[7], wo: v[8], bo: v[9] };
        let cfg = AttentionConfig {
            d_model: d,
            n_heads: 2,
            k_top: 4,
            normalizer: Normalizer::Entmax15,
            experts: 2,
            active_experts: 1,
            router_temp: 1.0,
        };
        let kv = concat_rows(v[0].tape(), &[v[0], v[1]])?;
        Ok(multi_head_attention(v[0], kv, None, &p, &cfg, None)?.0)
    }));
    let moe_inputs = {
        let mut t = vec![randn(&[5, d], r), randn(&[d, 3], r)];
        for _ in 0..3 {
            t.push(Tensor::randn(&[d, 2 * d], 0.5, r));
            t.push(Tensor::randn(&[2 * d], 0.5, r));
            t.push(Tensor::randn(&[2 * d, d], 0.5, r));
            t.push(Tensor::randn(&[d], 0.5, r));
        }
        t
    };
    cases.push(Case::new("route_experts_moe_ffn", moe_inputs.clone(), move |v| {
        let cfg = AttentionConfig {
            d_model: d,
            n_heads: 1,
            k_top: 1,
            normalizer: Normalizer::Softmax,
            experts: 3,
            active_experts: 2,
            router_temp: 0.7,
        };
        let routing = route_experts(v[0], v[1], &cfg)?;
        let experts: Vec<ExpertParams<'_>> = (0..3)
            .map(|j| ExpertParams { w1: v[2 + 4 * j], b1: v[3 + 4 * j], w2: v[4 + 4 * j], b2: v[5 + 4 * j] })
            .collect();
        Ok(moe_ffn(v[0], &routing, &experts)?)
    }));
    cases.push(Case::new("load_balance_loss", vec![randn(&[6, d], r), randn(&[d, 3], r)], move |v| {
        let cfg = AttentionConfig {
            d_model: d,
            n_heads: 1,
            k_top: 1,
            normalizer: Normalizer::Softmax,
            experts: 3,
            active_experts: 1,
            router_temp: 1.0,
        };
        Ok(load_balance_loss(&route_experts(v[0], v[1], &cfg)?)?)
    }));
    cases.push(Case::new("pool_segment", vec![randn(&[5, d], r), randn(&[3, d], r)], |v| {
        Ok(pool_segment(v[0], v[1])?.0)
    }));
    cases.push(Case::new(
        "gated_update",
        vec![randn(&[3, d], r), randn(&[3, d], r), randn(&[2 * d, 1], r), randn(&[1], r)],
        |v| {
            let p = MemoryParams { pool_queries: v[0], gate_w: v[2], gate_b: v[3] };
            Ok(gated_update(v[0], v[1], &p, GateMode::Learned)?.0)
        },
    ));
    cases.push(Case::new("edge_scores", vec![randn(&[5, d], r), randn(&[d, 3], r), randn(&[d, 3], r)], |v| {
        Ok(edge_scores(v[0], &StructureParams { wq: v[1], wk: v[2] })?)
    }));
    cases.push(Case::new("struct_loss", vec![randn(&[4, 4], r), randn(&[4, 4], r), randn(&[4, 4], r)], |v| {
        struct_loss(v)?.ok_or_else(|| TensorError::Contract("no drift".into()).into())
    }));
    if faulty {
        cases.push(Case::new("faulty_square", vec![randn(&[5], r)], |v| Ok(faulty_square(v[0]))));
    }
    let base = preset.model();
    let n = 6;
    cases.push(model_case("model_full", base.clone(), n, 11)?);
    cases.push(model_case("model_sparsemax", ModelConfig { phi: Normalizer::Sparsemax, ..base.clone() }, n, 12)?);
    let mut plain = base.clone();
    for m in Module::ALL {
        plain = ablate(&plain, m);
    }
    cases.push(model_case("model_all_ablated", plain, n, 13)?);
    Ok(cases)
}

/// Runs every case of `preset`.
pub fn run_suite(preset: Preset, faulty: bool) -> Result<Vec<OpReport>, Error> {
    registry(preset, faulty)?
        .iter()
        .enumerate()
        .map(|(i, c)| check(c, 1000 + i as u64))
        .collect()
}
