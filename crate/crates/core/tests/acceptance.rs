//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 9-11 train models for tens of minutes to hours and run only
//! with `RSST_ACCEPT_FULL=1`; otherwise they print SKIP. `RSST_ACCEPT_ONLY`
//! takes a comma-separated list of criterion numbers.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsst::ablation::{run_ablation, AblationTable};
use rsst::attention::{sparse_attention, AttentionPlan};
use rsst::autodiff::Tape;
use rsst::bench::{mode_exponent, run_bench, BenchMode};
use rsst::checkpoint;
use rsst::config::RunConfig;
use rsst::gradcheck::{run_suite, Preset, TOLERANCE};
use rsst::memory::{gated_update, pool_segment, update_memory, GateMode, HierMemory, MemoryParams};
use rsst::model::{ablate, Model, ModelConfig, Module};
use rsst::sparse::{argmax, entmax15, sparsemax};
use rsst::structure::{mean_drift, struct_loss};
use rsst::training::{
    batch_gradients, evaluate, gen_split, gen_task, train_loop, unigram_bpc, Example, LoopOptions, Split, TaskKind,
    TaskSpec, TrainConfig,
};
use rsst::Tensor;

const GRADCHECK_BUDGET_S: f64 = 120.0;
const SIMPLEX_ORACLE_TOL: f64 = 1e-8;
const ENTMAX_SUM_TOL: f64 = 1e-6;
const SHIFT_TOL: f64 = 1e-10;
const DENSE_REDUCTION_TOL: f64 = 1e-10;
const BENCH_LENGTHS: [usize; 4] = [256, 512, 1024, 2048];
const BENCH_K_TOP: usize = 32;
const DENSE_MIN_EXPONENT: f64 = 1.7;
const BUCKETED_MAX_EXPONENT: f64 = 1.3;
const BENCH_BUDGET_S: f64 = 600.0;
const EQUIVARIANCE_TOL: f64 = 1e-6;
const STRUCT_ORACLE_TOL: f64 = 1e-12;
const COPY_TARGET_ACCURACY: f64 = 0.99;
const COPY_MAX_STEPS: usize = 5000;
const CHAR_BUDGET_S: f64 = 600.0;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Outcome;

fn main() {
    let full = std::env::var("RSST_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("RSST_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, bool, Check); 12] = [
        (1, "gradient integrity", false, gradient_integrity),
        (2, "sparse-activation exactness", false, sparse_exactness),
        (3, "attention reduction", false, attention_reduction),
        (4, "complexity scaling", false, complexity_scaling),
        (5, "routing cardinality", false, routing_cardinality),
        (6, "memory contracts", false, memory_contracts),
        (7, "position-free structure", false, position_free),
        (8, "structure regularizer", false, structure_regularizer),
        (9, "learning capability", true, learning_capability),
        (10, "ablation direction", true, ablation_direction),
        (11, "noise-robustness direction", true, noise_robustness),
        (12, "determinism and persistence", false, determinism),
    ];
    let mut failed = 0;
    for (id, name, heavy, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        if heavy && !full {
            println!("SKIP {id:>2} {name}: long training run, set RSST_ACCEPT_FULL=1");
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| outcome(false, "panicked"));
        let secs = start.elapsed().as_secs_f64();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:>2} {name}: {} [{secs:.1}s]", result.detail);
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(Preset::Tiny, false).expect("gradcheck suite");
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let model_cases = reports.iter().filter(|r| r.name.starts_with("model")).count();
    let faulty_caught = run_suite(Preset::Tiny, true).expect("faulty suite").iter().any(|r| !r.passed());
    outcome(
        failing.is_empty() && model_cases > 0 && faulty_caught && secs <= GRADCHECK_BUDGET_S,
        format!(
            "{} cases, max rel err {worst:.2e} (tol {TOLERANCE:.0e}), failing {failing:?}, faulty op caught {faulty_caught}, {secs:.1}s of {GRADCHECK_BUDGET_S}s",
            reports.len()
        ),
    )
}

/// Projection onto the simplex by trying every support set.
fn projection_oracle(z: &[f64]) -> Vec<f64> {
    let p = z.len();
    for mask in 1u32..(1 << p) {
        let members: Vec<usize> = (0..p).filter(|i| mask >> i & 1 == 1).collect();
        let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
        let inside = members.iter().all(|&i| z[i] > tau);
        let outside = (0..p).filter(|i| mask >> i & 1 == 0).all(|i| z[i] <= tau);
        if inside && outside {
            return z.iter().map(|&v| (v - tau).max(0.0)).collect();
        }
    }
    unreachable!()
}

fn sparse_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut oracle_err, mut sum_err, mut shift_err) = (0.0f64, 0.0f64, 0.0f64);
    let (mut unique, mut preserved) = (0, 0);
    for _ in 0..1000 {
        let p = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..4.0);
        let z: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let s = sparsemax(&z).unwrap().probs;
        oracle_err = oracle_err.max(s.iter().zip(projection_oracle(&z)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let e = entmax15(&z).unwrap().probs;
        sum_err = sum_err.max((e.iter().sum::<f64>() - 1.0).abs());
        let c = rng.random_range(-20.0..20.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let es = entmax15(&shifted).unwrap().probs;
        shift_err = shift_err.max(e.iter().zip(&es).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let top = argmax(&z).unwrap();
        if z.iter().enumerate().all(|(i, &v)| i == top || v < z[top]) {
            unique += 1;
            preserved += usize::from(argmax(&e) == Some(top));
        }
    }
    outcome(
        oracle_err <= SIMPLEX_ORACLE_TOL && sum_err <= ENTMAX_SUM_TOL && shift_err <= SHIFT_TOL && preserved == unique,
        format!(
            "sparsemax vs oracle {oracle_err:.1e}, entmax |sum-1| {sum_err:.1e}, shift {shift_err:.1e}, argmax kept {preserved}/{unique}"
        ),
    )
}

fn attention_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (heads, n, dh) = (4, 64, 16);
    let q = Tensor::randn(&[heads, n, dh], 1.0, &mut rng);
    let k = Tensor::randn(&[heads, n, dh], 1.0, &mut rng);
    let v = Tensor::randn(&[heads, n, dh], 1.0, &mut rng);
    let tape = Tape::new();
    let plan = AttentionPlan { k_top: n, normalizer: rsst::sparse::Normalizer::Softmax, candidates: None };
    let (out, _) =
        sparse_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), None, &plan).unwrap();
    let out = out.to_tensor();
    let at = |t: &Tensor, h: usize, i: usize, c: usize| t.data()[(h * n + i) * dh + c];
    let mut worst = 0.0f64;
    for h in 0..heads {
        for i in 0..n {
            let s: Vec<f64> =
                (0..n).map(|j| (0..dh).map(|c| at(&q, h, i, c) * at(&k, h, j, c)).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                let want: f64 = (0..n).map(|j| w[j] / z * at(&v, h, j, c)).sum();
                worst = worst.max((at(&out, h, i, c) - want).abs());
            }
        }
    }
    outcome(worst <= DENSE_REDUCTION_TOL, format!("max deviation from dense softmax attention {worst:.1e}"))
}

fn complexity_scaling() -> Outcome {
    let start = Instant::now();
    let rows = run_bench(&[BenchMode::Dense, BenchMode::Bucketed], &BENCH_LENGTHS, BENCH_K_TOP, 5, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dense = mode_exponent(&rows, BenchMode::Dense).unwrap();
    let bucketed = mode_exponent(&rows, BenchMode::Bucketed).unwrap();
    outcome(
        dense >= DENSE_MIN_EXPONENT && bucketed <= BUCKETED_MAX_EXPONENT && secs <= BENCH_BUDGET_S,
        format!("dense exponent {dense:.2} (>= {DENSE_MIN_EXPONENT}), bucketed {bucketed:.2} (<= {BUCKETED_MAX_EXPONENT}), {secs:.0}s"),
    )
}

fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn routing_cardinality() -> Outcome {
    let config = ModelConfig { vocab_size: 32, ..ModelConfig::paper_preset() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(config.clone(), 5).unwrap();
    let mut exact = true;
    for _ in 0..5 {
        let p = model.run(&random_tokens(40, 32, &mut rng), true).unwrap();
        exact &= p.trace.iterations.iter().all(|it| it.expert_sets.iter().all(|s| s.len() == 2 && s[0] != s[1]));
    }
    // shift the router input so experts 0 and 1 win for every token
    let mut steered = model.clone();
    steered.params.get_mut("ln2.bias").unwrap().data_mut()[0] = 100.0;
    let router = steered.params.get_mut("router.w").unwrap();
    router.data_mut().fill(0.0);
    for j in 0..config.experts {
        router.data_mut()[j] = if j < 2 { 1.0 } else { -1.0 };
    }
    let examples: Vec<Example> = (0..4)
        .map(|_| {
            let tokens = random_tokens(24, 32, &mut rng);
            Example { targets: tokens.iter().map(|&t| Some(t)).collect(), tokens }
        })
        .collect();
    let mut used = vec![false; config.experts];
    for ex in &examples {
        for it in steered.run(&ex.tokens, true).unwrap().trace.iterations {
            it.expert_sets.iter().flatten().for_each(|&j| used[j] = true);
        }
    }
    let batch: Vec<&Example> = examples.iter().collect();
    let (_, grads) = batch_gradients(&steered, &batch, None).unwrap();
    let names = steered.params.names();
    let (mut idle_zero, mut active_nonzero) = (true, true);
    for j in 0..config.experts {
        let prefix = format!("expert.{j}.");
        let nonzero = names.iter().zip(&grads).filter(|(n, _)| n.starts_with(&prefix)).any(|(_, g)| g.iter().any(|&x| x != 0.0));
        if used[j] {
            active_nonzero &= nonzero;
        } else {
            idle_zero &= !nonzero;
        }
    }
    let idle = used.iter().filter(|u| !**u).count();
    outcome(
        exact && idle > 0 && idle_zero && active_nonzero,
        format!("2 of 8 experts per token: {exact}; {idle} idle experts with exactly zero gradient: {idle_zero}"),
    )
}

fn params_image(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in model.params.iter() {
        out.extend_from_slice(name.as_bytes());
        t.shape().iter().for_each(|s| out.extend_from_slice(&(*s as u64).to_le_bytes()));
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

fn memory_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, d) = (8, 16);
    let tape = Tape::new();
    let params = MemoryParams {
        pool_queries: tape.param(Tensor::randn(&[m, d], 1.0, &mut rng)),
        gate_w: tape.param(Tensor::randn(&[2 * d, 1], 0.2, &mut rng)),
        gate_b: tape.param(Tensor::zeros(&[1])),
    };
    let prev = tape.constant(Tensor::randn(&[m, d], 1.0, &mut rng));
    let hat = tape.constant(Tensor::randn(&[m, d], 1.0, &mut rng));
    let keep = gated_update(prev, hat, &params, GateMode::Forced(1.0)).unwrap().0;
    let replace = gated_update(prev, hat, &params, GateMode::Forced(0.0)).unwrap().0;
    let endpoints = keep.value() == prev.value() && replace.value() == hat.value();

    let mut shapes = true;
    for n in [4, 64, 256] {
        let mut mem = HierMemory::new(m);
        for _ in 0..3 {
            let h = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
            mem = update_memory(h, &mem, &params, GateMode::Learned).unwrap().0;
            shapes &= mem.segment().unwrap().shape() == vec![m, d];
        }
        shapes &= pool_segment(tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng)), params.pool_queries).unwrap().0.shape()
            == vec![m, d];
    }

    let images: Vec<Vec<u8>> =
        [1, 4, 8].iter().map(|&k| params_image(&Model::new(ModelConfig { iterations: k, ..ModelConfig::default() }, 3).unwrap())).collect();
    let tied = images.windows(2).all(|w| w[0] == w[1]);
    outcome(endpoints && shapes && tied, format!("exact endpoints {endpoints}, m×d across n {shapes}, K-independent parameters {tied}"))
}

fn permutation_error(model: &Model, tokens: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let base = model.run(tokens, false).unwrap().logits;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        perm.shuffle(rng);
        let permuted: Vec<usize> = perm.iter().map(|&i| tokens[i]).collect();
        let out = model.run(&permuted, false).unwrap().logits;
        for (r, &i) in perm.iter().enumerate() {
            worst = out.row(r).iter().zip(base.row(i)).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    worst
}

fn position_free() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = ModelConfig { vocab_size: 48, ..ModelConfig::default() };
    let tokens = random_tokens(48, 48, &mut rng);
    let full = permutation_error(&Model::new(config.clone(), 1).unwrap(), &tokens, &mut rng);
    let positional = permutation_error(&Model::new(ablate(&config, Module::Structure), 1).unwrap(), &tokens, &mut rng);
    outcome(
        full <= EQUIVARIANCE_TOL && positional > EQUIVARIANCE_TOL,
        format!("20 permutations: full model {full:.1e}, soes-off {positional:.1e}"),
    )
}

fn small_task(kind: TaskKind, seq_len: usize) -> (TaskSpec, ModelConfig, TrainConfig) {
    let spec = TaskSpec { seq_len, max_len: 64, train_size: 256, dev_size: 32, test_size: 32, ..TaskSpec::new(kind) };
    let config = ModelConfig {
        vocab_size: spec.model_vocab(),
        d_model: 16,
        n_heads: 2,
        iterations: 3,
        k_top: 8,
        memory_slots: 4,
        experts: 4,
        struct_dim: 8,
        ..ModelConfig::default()
    };
    let tc = TrainConfig { steps: 100, batch_size: 4, lr_peak: 3e-3, warmup_steps: 10, total_steps: 100, eval_every: 50, seed: 11, ..TrainConfig::default() };
    (spec, config, tc)
}

fn structure_regularizer() -> Outcome {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = tape.constant(Tensor::randn(&[6, 6], 1.0, &mut rng));
    let identical = struct_loss(&[g, g, g]).unwrap().unwrap().item();
    let graphs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[6, 6], 1.0, &mut rng)).collect();
    let vars: Vec<_> = graphs.iter().map(|t| tape.constant(t.clone())).collect();
    let mut want = 0.0;
    for t in 1..graphs.len() {
        for (a, b) in graphs[t].data().iter().zip(graphs[t - 1].data()) {
            want += (a - b) * (a - b);
        }
    }
    let oracle_err = (struct_loss(&vars).unwrap().unwrap().item() - want).abs();

    let (spec, config, tc) = small_task(TaskKind::Copy, 8);
    let data = gen_task(&spec).unwrap();
    let drift = |lambda: f64| {
        let out = train_loop(&ModelConfig { lambda_struct: lambda, ..config.clone() }, &data, &tc, &LoopOptions::default()).unwrap();
        let total: f64 =
            data.test.iter().map(|ex| mean_drift(&out.last.run(&ex.tokens, true).unwrap().trace.graphs())).sum();
        total / data.test.len() as f64
    };
    let (free, penalized) = (drift(0.0), drift(0.1));
    outcome(
        identical == 0.0 && oracle_err <= STRUCT_ORACLE_TOL && penalized < free,
        format!("identical graphs {identical}, 6×6 oracle {oracle_err:.1e}, drift λ=0.1 {penalized:.4e} vs λ=0 {free:.4e}"),
    )
}

/// Copy task at the desk configuration with the learning budget used by
/// every copy run in this suite.
fn copy_run(seed: u64) -> RunConfig {
    let task = TaskSpec { dev_size: 128, ..TaskSpec::new(TaskKind::Copy) };
    let model = ModelConfig { vocab_size: task.model_vocab(), ..ModelConfig::default() };
    let train = TrainConfig {
        steps: COPY_MAX_STEPS,
        batch_size: 16,
        lr_peak: 1e-3,
        warmup_steps: 50,
        total_steps: COPY_MAX_STEPS,
        eval_every: 100,
        stop_at_accuracy: 0.995,
        seed,
        ..TrainConfig::default()
    };
    RunConfig { model, train, task, ..RunConfig::default() }
}

fn char_run(seed: u64) -> RunConfig {
    let task = TaskSpec::new(TaskKind::CharLm);
    let model = ModelConfig { vocab_size: task.model_vocab(), ..ModelConfig::default() };
    let train = TrainConfig {
        steps: 100_000,
        batch_size: 16,
        lr_peak: 3e-3,
        warmup_steps: 50,
        total_steps: 3000,
        eval_every: 250,
        seed,
        ..TrainConfig::default()
    };
    RunConfig { model, train, task, ..RunConfig::default() }
}

fn learning_capability() -> Outcome {
    let mut accs = Vec::new();
    let mut steps = Vec::new();
    for seed in SEEDS {
        let run = copy_run(seed);
        let data = gen_task(&run.task).unwrap();
        let out = train_loop(&run.model, &data, &run.train, &LoopOptions::default()).unwrap();
        accs.push(evaluate(&out.best, &data.test).unwrap().token_accuracy);
        steps.push(out.steps_run);
    }
    let copy_mean = accs.iter().sum::<f64>() / accs.len() as f64;

    let run = char_run(0);
    let data = gen_task(&run.task).unwrap();
    let opts = LoopOptions { time_budget_s: Some(CHAR_BUDGET_S), ..Default::default() };
    let out = train_loop(&run.model, &data, &run.train, &opts).unwrap();
    let bpc = evaluate(&out.best, &data.test).unwrap().bits_per_char;
    let baseline = unigram_bpc(Split::Test);
    outcome(
        copy_mean >= COPY_TARGET_ACCURACY && steps.iter().all(|&s| s <= COPY_MAX_STEPS) && bpc < baseline,
        format!(
            "copy test accuracy {accs:.4?} (mean {copy_mean:.4}) after {steps:?} steps; char-LM {bpc:.3} bpc after {} steps vs unigram {baseline:.3}",
            out.steps_run
        ),
    )
}

/// Smaller models and budgets than the desk configuration so that 4
/// variants × 3 seeds × 3 tasks fit in a few CPU hours. The copy budget
/// stops short of saturation so that differences stay visible; retrieval
/// trains at length 32 and is tested at 512.
fn ablation_bases() -> Vec<(&'static str, RunConfig, Option<usize>)> {
    let model = |vocab: usize| ModelConfig { vocab_size: vocab, d_model: 32, n_heads: 4, iterations: 3, k_top: 16, memory_slots: 8, experts: 4, active_experts: 2, struct_dim: 8, ..ModelConfig::default() };
    let train = |steps: usize| TrainConfig { steps, batch_size: 16, lr_peak: 3e-3, warmup_steps: 50, total_steps: steps, eval_every: 100, ..TrainConfig::default() };

    let copy = TaskSpec { seq_len: 16, max_len: 16, vocab: 8, dev_size: 64, test_size: 128, ..TaskSpec::new(TaskKind::Copy) };
    let qa = TaskSpec { seq_len: 32, dev_size: 64, test_size: 128, noise: 0.25, ..TaskSpec::new(TaskKind::DistractorQa) };
    let lm = TaskSpec { dev_size: 256, test_size: 1024, ..TaskSpec::new(TaskKind::CharLm) };
    vec![
        ("copy accuracy", RunConfig { model: model(copy.model_vocab()), train: train(600), task: copy, ..RunConfig::default() }, None),
        ("distractor_qa accuracy at 512", RunConfig { model: model(qa.model_vocab()), train: train(1500), task: qa, ..RunConfig::default() }, Some(512)),
        ("char-LM bpc", RunConfig { model: model(lm.model_vocab()), train: train(1000), task: lm, ..RunConfig::default() }, None),
    ]
}

fn ablation_direction() -> Outcome {
    let mut tables: Vec<(&str, AblationTable)> = Vec::new();
    for (name, base, eval_len) in ablation_bases() {
        let table = run_ablation(&base, &Module::ALL, &SEEDS, eval_len).unwrap();
        println!("  {name}\n{}", indent(&table.render()));
        tables.push((name, table));
    }
    let mut lines = Vec::new();
    let mut all = true;
    for (i, m) in Module::ALL.iter().enumerate() {
        let hits: Vec<&str> = tables.iter().filter(|(_, t)| t.degraded(&t.rows[i + 1])).map(|(n, _)| *n).collect();
        all &= !hits.is_empty();
        lines.push(format!("w/o {} degrades {hits:?}", m.tag()));
    }
    outcome(all, lines.join("; "))
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
}

fn noise_robustness() -> Outcome {
    let (_, base, _) = ablation_bases().into_iter().nth(1).unwrap();
    let mut drops = Vec::new();
    for model in [base.model.clone(), ablate(&base.model, Module::SparseAttention)] {
        let mut acc = [0.0; 2];
        for (slot, noise) in [0.0, 0.5].into_iter().enumerate() {
            let task = TaskSpec { noise, ..base.task.clone() };
            let data = gen_task(&task).unwrap();
            for seed in SEEDS {
                let tc = TrainConfig { seed, ..base.train.clone() };
                let out = train_loop(&model, &data, &tc, &LoopOptions::default()).unwrap();
                acc[slot] += evaluate(&out.best, &gen_split(&task, Split::Test).unwrap()).unwrap().token_accuracy / SEEDS.len() as f64;
            }
        }
        drops.push((acc, (acc[0] - acc[1]) / acc[0]));
    }
    let ((full_acc, full_drop), (dense_acc, dense_drop)) = (drops[0], drops[1]);
    outcome(
        full_drop < dense_drop,
        format!(
            "full {:.3}→{:.3} (drop {:.1}%), asam-off {:.3}→{:.3} (drop {:.1}%)",
            full_acc[0],
            full_acc[1],
            100.0 * full_drop,
            dense_acc[0],
            dense_acc[1],
            100.0 * dense_drop
        ),
    )
}

fn determinism() -> Outcome {
    let (spec, config, tc) = small_task(TaskKind::Copy, 8);
    let data = gen_task(&spec).unwrap();
    let opts = LoopOptions { record_losses: true, ..LoopOptions::default() };
    let a = train_loop(&config, &data, &tc, &opts).unwrap();
    let b = train_loop(&config, &data, &tc, &opts).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let identical = a.losses.len() == 100 && bits(&a.losses) == bits(&b.losses);

    let dir = tempfile::tempdir().unwrap();
    let out = train_loop(&config, &data, &tc, &LoopOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    let loaded = checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    let reproduced = evaluate(&loaded, &data.test).unwrap() == evaluate(&out.best, &data.test).unwrap();
    outcome(identical && reproduced, format!("100-step losses bit-identical {identical}, checkpoint round trip reproduces metrics {reproduced}"))
}
