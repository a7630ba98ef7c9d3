//! `rsst`: train, evaluate, gradient-check, benchmark, ablate and export
//! latent graphs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rsst::ablation::run_ablation;
use rsst::bench::{bench_csv, mode_exponent, run_bench, BenchMode, MIN_TRIALS};
use rsst::checkpoint;
use rsst::config::{parse_override, RunConfig};
use rsst::gradcheck::{run_suite, Preset, TOLERANCE};
use rsst::model::{Model, Module};
use rsst::structure::export_graph;
use rsst::training::{
    charset, check_vocab, evaluate, gen_split, length_sweep, sweep_csv, train_loop, LoopOptions, Split, TaskKind,
    TaskSpec,
};
use rsst::Error;

#[derive(Parser)]
#[command(name = "rsst", version, about = "Recurrent sparse structured transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.bin, metrics.jsonl and resolved.cfg.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` override, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Training seed; falls back to the SEED environment variable.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print metrics JSON for one split; `--lengths` also writes a sweep CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task kind. Defaults to the task in resolved.cfg next to the checkpoint.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        /// CSV path for the length sweep (default: sweep.csv beside the checkpoint).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation and the model.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Adds an operation with a wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Time attention per mode and length and fit log-log exponents.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        k_top: usize,
        /// dense, exact, bucketed or all.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long, default_value_t = MIN_TRIALS)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model and the ablated variants on the same seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// r2mu, asam, soes or all; repeatable.
        #[arg(long, required = true)]
        disable: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        /// Evaluate on test data regenerated at this length.
        #[arg(long)]
        eval_len: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Directory for ablation.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one forward pass and write the latent graphs as DOT.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-separated token ids, or plain text read as corpus characters.
        #[arg(long)]
        input_text: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure that maps to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Configuration errors become usage errors; everything else is a runtime failure.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::Config(m) => usage(format!("config: {m}")),
        other => other.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message before them.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Train { config, out, set, seed } => cmd_train(&config, out, &set, seed),
        Command::Eval { checkpoint, task, split, lengths, csv, set } => {
            cmd_eval(&checkpoint, task.as_deref(), &split, &lengths, csv, &set)
        }
        Command::Gradcheck { preset, inject_fault } => cmd_gradcheck(&preset, inject_fault),
        Command::Bench { lengths, k_top, mode, trials, out, seed } => {
            cmd_bench(&lengths, k_top, &mode, trials, out, seed)
        }
        Command::Ablate { config, disable, seeds, eval_len, set, out } => {
            cmd_ablate(&config, &disable, &seeds, eval_len, &set, out)
        }
        Command::ExportGraph { checkpoint, input_text, out } => cmd_export(&checkpoint, &input_text, &out),
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| usage(format!("SEED: expected an integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn overrides(set: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    set.iter().map(|s| parse_override(s).map_err(classify)).collect()
}

fn load_config(path: &Path, set: &[String], seed: Option<u64>) -> anyhow::Result<RunConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    let mut pairs = overrides(set)?;
    // precedence: --seed, then --set seed=..., then SEED, then the file
    let seed = match seed {
        Some(s) => Some(s),
        None if pairs.iter().any(|(k, _)| k == "seed") => None,
        None => env_seed()?,
    };
    if let Some(seed) = seed {
        pairs.retain(|(k, _)| k != "seed");
        pairs.push(("seed".into(), seed.to_string()));
    }
    RunConfig::load(path, &pairs).map_err(classify)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, out: Option<PathBuf>, set: &[String], seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(config, set, seed)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write(&cfg.out_dir.join("resolved.cfg"), &cfg.render())?;
    let data = rsst::training::gen_task(&cfg.task).map_err(classify)?;
    let opts = LoopOptions { out_dir: Some(cfg.out_dir.clone()), ..Default::default() };
    let outcome = train_loop(&cfg.model, &data, &cfg.train, &opts).map_err(classify)?;
    let summary = serde_json::json!({
        "steps_run": outcome.steps_run,
        "stopped_early": outcome.stopped_early,
        "best_dev": outcome.best_dev.map(|m| m.to_map()),
        "out_dir": cfg.out_dir.display().to_string(),
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Model> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

/// Task of the run that produced `ckpt`, from resolved.cfg beside it.
fn sibling_task(ckpt: &Path) -> anyhow::Result<Option<TaskSpec>> {
    let resolved = ckpt.with_file_name("resolved.cfg");
    if !resolved.is_file() {
        return Ok(None);
    }
    Ok(Some(RunConfig::load(&resolved, &[]).map_err(classify)?.task))
}

fn cmd_eval(
    ckpt: &Path,
    task: Option<&str>,
    split: &str,
    lengths: &[usize],
    csv: Option<PathBuf>,
    set: &[String],
) -> anyhow::Result<ExitCode> {
    let model = load_checkpoint(ckpt)?;
    let split = Split::parse(split).ok_or_else(|| usage(format!("--split: unknown split {split:?}")))?;
    let kind = task.map(|t| TaskKind::parse(t).ok_or_else(|| usage(format!("--task: unknown task {t:?}")))).transpose()?;
    let mut spec = match (sibling_task(ckpt)?, kind) {
        (Some(spec), Some(k)) if spec.kind != k => TaskSpec::new(k),
        (Some(spec), _) => spec,
        (None, Some(k)) => TaskSpec::new(k),
        (None, None) => return Err(usage("--task is required without resolved.cfg beside the checkpoint")),
    };
    for (k, v) in overrides(set)? {
        spec.set(&k, &v).map_err(classify)?;
    }
    spec.validate().map_err(classify)?;
    check_vocab(&model, &spec).map_err(|e| usage(e.to_string()))?;
    let examples = gen_split(&spec, split).map_err(classify)?;
    let metrics = evaluate(&model, &examples)?;
    let mut json = serde_json::json!({ "task": spec.kind.name(), "split": split.name(), "seq_len": spec.seq_len });
    for (k, v) in metrics.to_map() {
        json[k] = v.into();
    }
    println!("{json}");
    if !lengths.is_empty() {
        let rows = length_sweep(&model, &spec, lengths).map_err(classify)?;
        let path = csv.unwrap_or_else(|| ckpt.with_file_name("sweep.csv"));
        write(&path, &sweep_csv(&rows))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(preset: &str, inject_fault: bool) -> anyhow::Result<ExitCode> {
    let preset = Preset::parse(preset).ok_or_else(|| usage(format!("--preset: unknown preset {preset:?}")))?;
    let reports = run_suite(preset, inject_fault)?;
    for r in &reports {
        let tag = if r.passed() { "ok" } else { "FAIL" };
        println!("{tag:<4} {:<24} max_rel_err {:.3e} checked {} skipped {}", r.name, r.max_rel_err, r.checked, r.skipped);
    }
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    println!("{} operations checked, tolerance {TOLERANCE:e}", reports.len());
    if failing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failing.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_bench(
    lengths: &[usize],
    k_top: usize,
    mode: &str,
    trials: usize,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<ExitCode> {
    let modes = match mode {
        "all" => BenchMode::ALL.to_vec(),
        m => vec![BenchMode::parse(m).ok_or_else(|| usage(format!("--mode: unknown mode {m:?}")))?],
    };
    if lengths.is_empty() || k_top == 0 {
        return Err(usage("--lengths and --k-top must be non-empty and positive"));
    }
    let seed = seed.map_or_else(env_seed, |s| Ok(Some(s)))?.unwrap_or(0);
    let rows = run_bench(&modes, lengths, k_top, trials, seed).map_err(classify)?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(path) = out {
        write(&path, &csv)?;
    }
    for m in modes {
        match mode_exponent(&rows, m) {
            Some(e) => println!("exponent {} {e:.3}", m.name()),
            None => println!("exponent {} n/a", m.name()),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_modules(names: &[String]) -> anyhow::Result<Vec<Module>> {
    let mut out = Vec::new();
    for name in names {
        let found: Vec<Module> = if name.eq_ignore_ascii_case("all") {
            Module::ALL.to_vec()
        } else {
            vec![Module::parse(name).ok_or_else(|| usage(format!("--disable: unknown module {name:?}")))?]
        };
        for m in found {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    Ok(out)
}

fn cmd_ablate(
    config: &Path,
    disable: &[String],
    seeds: &[u64],
    eval_len: Option<usize>,
    set: &[String],
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let modules = parse_modules(disable)?;
    let cfg = load_config(config, set, None)?;
    let table = run_ablation(&cfg, &modules, seeds, eval_len).map_err(classify)?;
    print!("{}", table.render());
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("ablation.csv"), &table.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Token ids and node labels for `text`.
fn tokenize(text: &str) -> (Vec<usize>, Vec<String>) {
    let words: Vec<&str> = text.split_whitespace().collect();
    if !words.is_empty() {
        if let Ok(ids) = words.iter().map(|w| w.parse::<usize>()).collect::<Result<Vec<_>, _>>() {
            return (ids, words.iter().map(|w| w.to_string()).collect());
        }
    }
    let set = charset();
    text.chars()
        .map(|c| (set.binary_search(&c).unwrap_or(usize::MAX), c.to_string()))
        .unzip()
}

fn cmd_export(ckpt: &Path, text: &str, out: &Path) -> anyhow::Result<ExitCode> {
    let model = load_checkpoint(ckpt)?;
    let (tokens, labels) = tokenize(text);
    if tokens.is_empty() {
        return Err(usage("--input-text is empty"));
    }
    if let Some(i) = tokens.iter().position(|&t| t >= model.config.vocab_size) {
        return Err(usage(format!(
            "--input-text: token {:?} is outside the model vocabulary of {}",
            labels[i], model.config.vocab_size
        )));
    }
    let pred = model.run(&tokens, true)?;
    let graphs = pred.trace.graphs();
    if graphs.is_empty() {
        return Err(anyhow!("the model has no structure module, so there are no graphs to export"));
    }
    export_graph(&graphs, &labels, out)?;
    eprintln!("wrote {} ({} iterations, {} nodes each)", out.display(), graphs.len(), tokens.len());
    Ok(ExitCode::SUCCESS)
}
