//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. A key may appear
//! once per file; `--set key=value` overrides are applied afterwards in
//! order. The rendered form lists every key and reproduces the same
//! configuration when parsed back.

use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::model::{ModelConfig, MODEL_KEYS};
use crate::training::{TaskKind, TaskSpec, TrainConfig, TASK_KEYS, TRAIN_KEYS};

/// Parses `key = value` lines, keeping their order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, Error> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("{k}: set twice")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render_pairs(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?}: expected key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Everything one run needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskSpec::new(TaskKind::Copy);
        let model = ModelConfig { vocab_size: task.model_vocab(), ..ModelConfig::default() };
        Self { model, train: TrainConfig::default(), task, out_dir: PathBuf::from("runs/default") }
    }
}

impl RunConfig {
    /// Applies pairs on top of the defaults. `task` is applied first so the
    /// task's own defaults can be overridden by the other `task_*` keys.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, Error> {
        let mut cfg = RunConfig::default();
        if let Some((_, kind)) = pairs.iter().find(|(k, _)| k == "task") {
            let kind = TaskKind::parse(kind).ok_or_else(|| Error::Config(format!("task: unknown task {kind:?}")))?;
            cfg.task = TaskSpec::new(kind);
        }
        let mut vocab_given = None;
        for (k, v) in pairs {
            if k == "task" {
                continue;
            }
            if k == "vocab_size" {
                vocab_given = Some(crate::model::parse_field::<usize>(k, v)?);
            }
            cfg.set(k, v)?;
        }
        cfg.resolve(vocab_given)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        if key == "out" {
            self.out_dir = PathBuf::from(value);
            Ok(())
        } else if MODEL_KEYS.contains(&key) {
            self.model.set(key, value)
        } else if TRAIN_KEYS.contains(&key) {
            self.train.set(key, value)
        } else if TASK_KEYS.contains(&key) {
            self.task.set(key, value)
        } else {
            Err(Error::Config(format!("{key}: unknown key")))
        }
    }

    /// Derives the model vocabulary from the task and validates every part.
    fn resolve(&mut self, vocab_given: Option<usize>) -> Result<(), Error> {
        self.task.validate()?;
        let need = self.task.model_vocab();
        if let Some(v) = vocab_given {
            if v != need {
                return Err(Error::Config(format!(
                    "vocab_size: task {} needs {need}, got {v}",
                    self.task.kind.name()
                )));
            }
        }
        self.model.vocab_size = need;
        self.model.validate()?;
        self.train.validate()
    }

    /// Reads `path`, then applies `overrides` in order.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = parse_pairs(&text)?;
        for (k, v) in overrides {
            match pairs.iter_mut().find(|(seen, _)| seen == k) {
                Some(slot) => slot.1 = v.clone(),
                None => pairs.push((k.clone(), v.clone())),
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn render(&self) -> String {
        let mut pairs = vec![("out", self.out_dir.display().to_string())];
        pairs.extend(self.task.pairs());
        pairs.extend(self.model.pairs());
        pairs.extend(self.train.pairs());
        render_pairs(&pairs)
    }
}
