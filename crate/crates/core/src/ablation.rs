//! Paired full-versus-ablated training runs.
//!
//! Every variant is trained on the same data with the same seeds; the table
//! reports the seed mean of one metric per variant and its relative change
//! `(ablated − full) / full`.

use crate::config::RunConfig;
use crate::error::Error;
use crate::model::{ablate, Module};
use crate::training::{evaluate, gen_split, gen_task, train_loop, LoopOptions, Split, TaskSpec};

/// Which metric a table reports and which direction is worse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMetric {
    TokenAccuracy,
    BitsPerChar,
}

impl AblationMetric {
    pub fn for_task(spec: &TaskSpec) -> Self {
        if spec.kind.is_lm() {
            AblationMetric::BitsPerChar
        } else {
            AblationMetric::TokenAccuracy
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMetric::TokenAccuracy => "token_accuracy",
            AblationMetric::BitsPerChar => "bits_per_char",
        }
    }

    /// Whether `value` is worse than `reference`.
    pub fn degrades(self, reference: f64, value: f64) -> bool {
        match self {
            AblationMetric::TokenAccuracy => value < reference,
            AblationMetric::BitsPerChar => value > reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `None` for the full model.
    pub disabled: Option<Module>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// `(mean − full) / full`; `None` on the full row and when `full` is 0.
    pub relative_change: Option<f64>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self.disabled {
            None => "Full".to_string(),
            Some(m) => format!("w/o {}", m.tag()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub metric: AblationMetric,
    /// Test length the metric was measured at.
    pub eval_len: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn full(&self) -> &AblationRow {
        &self.rows[0]
    }

    /// Whether the ablated row's seed mean is worse than the full model's.
    pub fn degraded(&self, row: &AblationRow) -> bool {
        self.metric.degrades(self.full().mean, row.mean)
    }

    pub fn render(&self) -> String {
        let mut s = format!("| Variant | {} (len {}) | Relative change |\n|---|---|---|\n", self.metric.name(), self.eval_len);
        for r in &self.rows {
            let rel = match r.relative_change {
                Some(c) => format!("{:+.2}%", 100.0 * c),
                None => "-".to_string(),
            };
            s.push_str(&format!("| {} | {:.4} | {} |\n", r.label(), r.mean, rel));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,eval_len,mean,relative_change,per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|x| x.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label(),
                self.metric.name(),
                self.eval_len,
                r.mean,
                r.relative_change.map(|c| c.to_string()).unwrap_or_default(),
                per.join(";")
            ));
        }
        s
    }
}

/// Trains `base` once per seed and returns the chosen metric on the test
/// split regenerated at `eval_len` (the task length when `None`).
pub fn seed_scores(base: &RunConfig, seeds: &[u64], eval_len: Option<usize>) -> Result<Vec<f64>, Error> {
    let data = gen_task(&base.task)?;
    let metric = AblationMetric::for_task(&base.task);
    let test = match eval_len {
        Some(len) if len != base.task.seq_len => gen_split(&base.task.with_len(len), Split::Test)?,
        _ => data.test.clone(),
    };
    seeds
        .iter()
        .map(|&seed| {
            let tc = crate::training::TrainConfig { seed, ..base.train.clone() };
            let out = train_loop(&base.model, &data, &tc, &LoopOptions::default())?;
            let m = evaluate(&out.best, &test)?;
            Ok(match metric {
                AblationMetric::TokenAccuracy => m.token_accuracy,
                AblationMetric::BitsPerChar => m.bits_per_char,
            })
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Full model first, then one row per entry of `disable`.
pub fn run_ablation(
    base: &RunConfig,
    disable: &[Module],
    seeds: &[u64],
    eval_len: Option<usize>,
) -> Result<AblationTable, Error> {
    if seeds.is_empty() {
        return Err(Error::Config("seeds: need at least one".into()));
    }
    let metric = AblationMetric::for_task(&base.task);
    let full_scores = seed_scores(base, seeds, eval_len)?;
    let full = mean(&full_scores);
    let mut rows = vec![AblationRow { disabled: None, per_seed: full_scores, mean: full, relative_change: None }];
    for &m in disable {
        let cfg = RunConfig { model: ablate(&base.model, m), ..base.clone() };
        let scores = seed_scores(&cfg, seeds, eval_len)?;
        let avg = mean(&scores);
        rows.push(AblationRow { disabled: Some(m), per_seed: scores, mean: avg, relative_change: (full != 0.0).then(|| (avg - full) / full) });
    }
    Ok(AblationTable { metric, eval_len: eval_len.unwrap_or(base.task.seq_len), seeds: seeds.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::TaskKind;

    #[test]
    fn table_layout_and_relative_change() {
        let mut base = RunConfig::default();
        base.task = TaskSpec { train_size: 8, dev_size: 4, test_size: 4, ..TaskSpec::new(TaskKind::ShuffledCls) };
        base.task.seq_len = 6;
        base.model = ModelConfig { vocab_size: base.task.model_vocab(), ..ModelConfig::tiny() };
        base.train.steps = 2;
        base.train.batch_size = 2;
        base.train.warmup_steps = 1;
        base.train.total_steps = 2;
        let t = run_ablation(&base, &Module::ALL, &[0, 1], None).unwrap();
        let labels: Vec<String> = t.rows.iter().map(|r| r.label()).collect();
        assert_eq!(labels, ["Full", "w/o R2MU", "w/o ASAM", "w/o SOES"]);
        for r in &t.rows[1..] {
            let full = t.full().mean;
            let want = (full != 0.0).then(|| (r.mean - full) / full);
            assert_eq!(r.relative_change, want);
        }
        assert!(t.render().contains("| w/o SOES |"));
    }
}
