//! Training loop, evaluation and sweeps.

mod optim;
mod tasks;

pub use optim::{
    clip_global_norm, decays, learning_rate, optimizer_step, AdamState, TrainConfig, TRAIN_KEYS,
};
pub use tasks::{
    charset, cls_label, corpus_ids, corpus_range, gen_split, gen_task, CharVocab, CopyVocab,
    Dataset, Example, QaVocab, Split, TaskKind, TaskSpec, CORPUS, QA_FILLERS, QA_KEYS, QA_VALUES,
    TASK_KEYS,
};

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, TensorError};
use crate::model::{forward, loss, ForwardOptions, Model, ModelConfig, ModelParams};
use crate::sparse::argmax;

/// Scores of a model on one split. Accuracy and exact match are over
/// target positions and sequences; perplexity is `exp(mean CE)` and
/// bits-per-char is `mean CE / ln 2`, both per target token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub perplexity: f64,
    pub bits_per_char: f64,
    pub mean_ce: f64,
    pub targets: usize,
    pub sequences: usize,
}

impl Metrics {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("token_accuracy".to_string(), self.token_accuracy),
            ("exact_match".to_string(), self.exact_match),
            ("perplexity".to_string(), self.perplexity),
            ("bits_per_char".to_string(), self.bits_per_char),
        ])
    }
}

/// Per-sequence cross-entropy and correctness at every target.
fn score_example(model: &Model, ex: &Example) -> Result<(f64, usize, usize), Error> {
    let pred = model.run(&ex.tokens, false)?;
    let v = pred.logits.cols();
    let (mut ce, mut correct, mut count) = (0.0, 0, 0);
    for (i, t) in ex.targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = pred.logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        ce += lse - row[t];
        if argmax(row) == Some(t) {
            correct += 1;
        }
        count += 1;
        debug_assert!(t < v);
    }
    Ok((ce, correct, count))
}

/// Deterministic metrics of `model` over `examples`.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<Metrics, Error> {
    let (mut ce, mut correct, mut count, mut exact) = (0.0, 0usize, 0usize, 0usize);
    for ex in examples {
        let (c, ok, n) = score_example(model, ex)?;
        ce += c;
        correct += ok;
        count += n;
        if ok == n {
            exact += 1;
        }
    }
    if count == 0 {
        return Err(TensorError::Contract("evaluation split has no targets".into()).into());
    }
    let mean_ce = ce / count as f64;
    Ok(Metrics {
        token_accuracy: correct as f64 / count as f64,
        exact_match: exact as f64 / examples.len() as f64,
        perplexity: mean_ce.exp(),
        bits_per_char: mean_ce / std::f64::consts::LN_2,
        mean_ce,
        targets: count,
        sequences: examples.len(),
    })
}

/// Rejects a model whose vocabulary does not match the task.
pub fn check_vocab(model: &Model, spec: &TaskSpec) -> Result<(), Error> {
    let need = spec.model_vocab();
    if model.config.vocab_size != need {
        return Err(TensorError::Contract(format!(
            "model vocabulary {} does not match task {} vocabulary {need}",
            model.config.vocab_size,
            spec.kind.name()
        ))
        .into());
    }
    Ok(())
}

pub fn evaluate_split(model: &Model, data: &Dataset, split: Split) -> Result<Metrics, Error> {
    check_vocab(model, &data.spec)?;
    evaluate(model, data.split(split))
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock_s: f64,
}

/// Loss terms of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub structure: f64,
    pub balance: f64,
    pub grad_norm: f64,
}

/// Batch loss on a fresh tape; returns the loss statistics and the gradient
/// of every parameter, in store order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Example],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(StepStats, Vec<Vec<f64>>), Error> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let params = ModelParams::from_bound(&bound, &model.config)?;
    let mut opts = ForwardOptions { dropout_rng, ..Default::default() };
    let mut total: Option<Var<'_>> = None;
    let mut stats = StepStats { loss: 0.0, cross_entropy: 0.0, structure: 0.0, balance: 0.0, grad_norm: 0.0 };
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let out = forward(&ex.tokens, &params, &model.config, &mut opts)?;
        let parts = loss(&out, &ex.targets, &model.config)?;
        stats.cross_entropy += parts.cross_entropy * scale;
        stats.structure += parts.structure * scale;
        stats.balance += parts.balance * scale;
        let term = parts.total.scale(scale);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| TensorError::Contract("empty batch".into()))?;
    stats.loss = total.item();
    let grads = tape.backward(total)?;
    let g = bound.vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    Ok((stats, g))
}

/// Extra switches for [`train_loop`].
#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Directory for checkpoint.bin and metrics.jsonl.
    pub out_dir: Option<PathBuf>,
    /// Skip parameter updates (the early-stopping contract is tested with it).
    pub freeze: bool,
    /// Record the loss of every step.
    pub record_losses: bool,
    /// Wall-clock budget in seconds; the step that exceeds it is evaluated
    /// and ends the run.
    pub time_budget_s: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev score (the initial ones without evaluations).
    pub best: Model,
    pub last: Model,
    pub history: Vec<MetricRecord>,
    pub best_dev: Option<Metrics>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub losses: Vec<f64>,
}

/// Dev score used for model selection: accuracy, or negative cross-entropy
/// for language modelling.
fn selection_score(kind: TaskKind, m: &Metrics) -> f64 {
    if kind.is_lm() {
        -m.mean_ce
    } else {
        m.token_accuracy
    }
}

fn append_record(path: &Path, rec: &MetricRecord) -> Result<(), Error> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains a fresh model. Evaluates on dev every `eval_every` steps and at the
/// last step, keeps the best-dev parameters, and stops after
/// `early_stop_patience` evaluations without strict improvement or once
/// `stop_at_accuracy` is reached.
pub fn train_loop(
    model_config: &ModelConfig,
    data: &Dataset,
    tc: &TrainConfig,
    opts: &LoopOptions,
) -> Result<TrainOutcome, Error> {
    tc.validate()?;
    let mut model = Model::new(model_config.clone(), tc.seed)?;
    check_vocab(&model, &data.spec)?;
    if data.train.is_empty() {
        return Err(Error::Config("task_train_size: must be positive".into()));
    }
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join("checkpoint.bin"));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("metrics.jsonl");
        std::fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
    }
    let start = Instant::now();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0BA7_C4E5);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0D50_0D50);
    let mut state = crate::training::AdamState::new(model.params.tensors());
    let names = model.params.names().to_vec();
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_dev = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut stopped_early = false;
    let mut steps_run = 0;
    if let Some(p) = &ckpt_path {
        checkpoint::save(&model, p)?;
    }
    for step in 1..=tc.steps {
        let batch: Vec<&Example> =
            (0..tc.batch_size).map(|_| &data.train[batch_rng.random_range(0..data.train.len())]).collect();
        let rng = if model.config.dropout_rate > 0.0 { Some(&mut dropout_rng) } else { None };
        let (stats, mut grads) = batch_gradients(&model, &batch, rng)?;
        if !stats.loss.is_finite() {
            if let Some(dir) = &opts.out_dir {
                checkpoint::save(&model, &dir.join("last_good.bin"))?;
            }
            return Err(Error::TrainingAborted { step, reason: format!("loss is {}", stats.loss) });
        }
        if opts.record_losses {
            losses.push(stats.loss);
        }
        if !opts.freeze {
            optimizer_step(model.params.tensors_mut(), &names, &mut grads, &mut state, tc, step)?;
        }
        steps_run = step;
        let out_of_time = opts.time_budget_s.is_some_and(|b| start.elapsed().as_secs_f64() >= b);
        if step % tc.eval_every == 0 || step == tc.steps || out_of_time {
            let m = evaluate(&model, &data.dev)?;
            let rec = MetricRecord {
                step,
                split: Split::Dev.name().to_string(),
                metrics: m.to_map(),
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            if let Some(p) = &metrics_path {
                append_record(p, &rec)?;
            }
            history.push(rec);
            let score = selection_score(data.spec.kind, &m);
            if score > best_score {
                best_score = score;
                best = model.clone();
                best_dev = Some(m);
                since_best = 0;
                if let Some(p) = &ckpt_path {
                    checkpoint::save(&best, p)?;
                }
            } else {
                since_best += 1;
            }
            if tc.early_stop_patience > 0 && since_best >= tc.early_stop_patience {
                stopped_early = true;
                break;
            }
            if tc.stop_at_accuracy > 0.0 && m.token_accuracy >= tc.stop_at_accuracy {
                stopped_early = true;
                break;
            }
            if out_of_time {
                stopped_early = step < tc.steps;
                break;
            }
        }
    }
    Ok(TrainOutcome { best, last: model, history, best_dev, steps_run, stopped_early, losses })
}

/// One row of an accuracy-versus-length table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub length: usize,
    pub metrics: Metrics,
}

/// Evaluates `model` on the test split regenerated at each length.
pub fn length_sweep(model: &Model, spec: &TaskSpec, lengths: &[usize]) -> Result<Vec<SweepRow>, Error> {
    check_vocab(model, spec)?;
    lengths
        .iter()
        .map(|&len| {
            let s = spec.with_len(len);
            let test = gen_split(&s, Split::Test)?;
            Ok(SweepRow { length: len, metrics: evaluate(model, &test)? })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("length,token_accuracy,exact_match,perplexity,bits_per_char\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.length, m.token_accuracy, m.exact_match, m.perplexity, m.bits_per_char
        ));
    }
    s
}

/// Unigram bits-per-char: character frequencies counted on the training
/// range, cross-entropy measured on `split`. Add-one smoothing keeps
/// unseen characters finite.
pub fn unigram_bpc(split: Split) -> f64 {
    let ids = corpus_ids();
    let c = charset().len();
    let mut counts = vec![1.0; c];
    for &i in &ids[corpus_range(Split::Train, ids.len())] {
        counts[i] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let eval = &ids[corpus_range(split, ids.len())];
    let bits: f64 = eval.iter().map(|&i| -(counts[i] / total).log2()).sum();
    bits / eval.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_emit_initial_checkpoint_and_no_history() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec { train_size: 4, dev_size: 2, test_size: 2, seq_len: 4, max_len: 4, vocab: 3, ..TaskSpec::new(TaskKind::Copy) };
        let data = gen_task(&spec).unwrap();
        let mc = ModelConfig { vocab_size: spec.model_vocab(), ..ModelConfig::tiny() };
        let tc = TrainConfig { steps: 0, ..TrainConfig::default() };
        let out = train_loop(&mc, &data, &tc, &LoopOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
        assert!(out.history.is_empty());
        assert!(dir.path().join("checkpoint.bin").exists());
        assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
        let loaded = checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(loaded, out.best);
    }

    #[test]
    fn frozen_model_with_patience_one_stops_after_two_evaluations() {
        let spec = TaskSpec { train_size: 4, dev_size: 2, test_size: 2, seq_len: 4, max_len: 4, vocab: 3, ..TaskSpec::new(TaskKind::Copy) };
        let data = gen_task(&spec).unwrap();
        let mc = ModelConfig { vocab_size: spec.model_vocab(), ..ModelConfig::tiny() };
        let tc = TrainConfig { steps: 50, batch_size: 1, eval_every: 1, early_stop_patience: 1, ..TrainConfig::default() };
        let out = train_loop(&mc, &data, &tc, &LoopOptions { freeze: true, ..Default::default() }).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.stopped_early);
    }

    #[test]
    fn vocabulary_mismatch_is_a_contract_error() {
        let spec = TaskSpec::new(TaskKind::DistractorQa);
        let model = Model::new(ModelConfig::tiny(), 0).unwrap();
        assert!(matches!(check_vocab(&model, &spec), Err(Error::Tensor(TensorError::Contract(_)))));
    }
}
