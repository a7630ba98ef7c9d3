use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{AttentionParams, ExpertParams};
use crate::autodiff::{Tape, Var};
use crate::error::Error;
use crate::memory::MemoryParams;
use crate::structure::StructureParams;
use crate::tensor::Tensor;

/// Named, ordered parameter tensors. One set serves every iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), Error> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Fresh parameters for `config`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, Error> {
        config.validate()?;
        let d = config.d_model;
        let hidden = 4 * d;
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = Self::new();
        p.insert("embed", Tensor::randn(&[config.vocab_size, d], fan_in(d), rng))?;
        if config.uses_positions() {
            p.insert("pos_embed", Tensor::randn(&[config.max_positions, d], fan_in(d), rng))?;
        }
        for ln in ["ln1", "ln2", "ln_f"] {
            p.insert(format!("{ln}.gain"), Tensor::ones(&[d]))?;
            p.insert(format!("{ln}.bias"), Tensor::zeros(&[d]))?;
        }
        for w in ["q", "k", "v", "o"] {
            p.insert(format!("attn.w{w}"), Tensor::randn(&[d, d], fan_in(d), rng))?;
            p.insert(format!("attn.b{w}"), Tensor::zeros(&[d]))?;
        }
        p.insert("router.w", Tensor::randn(&[d, config.experts], fan_in(d), rng))?;
        for j in 0..config.experts {
            p.insert(format!("expert.{j}.w1"), Tensor::randn(&[d, hidden], fan_in(d), rng))?;
            p.insert(format!("expert.{j}.b1"), Tensor::zeros(&[hidden]))?;
            p.insert(format!("expert.{j}.w2"), Tensor::randn(&[hidden, d], fan_in(hidden), rng))?;
            p.insert(format!("expert.{j}.b2"), Tensor::zeros(&[d]))?;
        }
        if config.uses_memory() {
            p.insert("memory.pool_queries", Tensor::randn(&[config.memory_slots, d], 1.0, rng))?;
            p.insert("memory.gate_w", Tensor::randn(&[2 * d, 1], fan_in(2 * d), rng))?;
            p.insert("memory.gate_b", Tensor::zeros(&[1]))?;
        }
        if !config.disable_soes {
            p.insert("struct.wq", Tensor::randn(&[d, config.struct_dim], fan_in(d), rng))?;
            p.insert("struct.wk", Tensor::randn(&[d, config.struct_dim], fan_in(d), rng))?;
        }
        Ok(p)
    }

    /// Checks that names and shapes are exactly those `config` initializes.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<(), Error> {
        let expected = Self::layout(config)?;
        if expected.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(self.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    /// Names and shapes produced by [`ParamStore::init`].
    pub fn layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(Self::init(config, &mut rng)?
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect())
    }

    /// Records every tensor on `tape` as a differentiable leaf, in order.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> BoundParams<'t, 't> {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            index: &self.index,
        }
    }

    /// Records every tensor as a constant: no backward rules are kept.
    pub fn bind_constants<'t>(&'t self, tape: &'t Tape) -> BoundParams<'t, 't> {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            index: &self.index,
        }
    }

    /// Attaches this store's names to vars already on a tape, in store order.
    pub fn wrap<'a, 't>(&'a self, vars: Vec<Var<'t>>) -> Result<BoundParams<'a, 't>, Error> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Config(format!("expected {} parameters, got {}", self.tensors.len(), vars.len())));
        }
        Ok(BoundParams { vars, index: &self.index })
    }
}

/// Parameters recorded on a tape, in store order.
pub struct BoundParams<'a, 't> {
    pub vars: Vec<Var<'t>>,
    index: &'a HashMap<String, usize>,
}

impl<'t> BoundParams<'_, 't> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, Error> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams<'t> {
    pub gain: Var<'t>,
    pub bias: Var<'t>,
}

/// Typed view of the bound parameters.
#[derive(Clone, Debug)]
pub struct ModelParams<'t> {
    pub embed: Var<'t>,
    pub pos_embed: Option<Var<'t>>,
    pub ln1: NormParams<'t>,
    pub ln2: NormParams<'t>,
    pub ln_f: NormParams<'t>,
    pub attn: AttentionParams<'t>,
    pub router: Var<'t>,
    pub experts: Vec<ExpertParams<'t>>,
    pub memory: Option<MemoryParams<'t>>,
    pub structure: Option<StructureParams<'t>>,
}

impl<'t> ModelParams<'t> {
    pub fn from_bound(b: &BoundParams<'_, 't>, config: &ModelConfig) -> Result<Self, Error> {
        let norm = |p: &str| -> Result<NormParams<'t>, Error> {
            Ok(NormParams { gain: b.get(&format!("{p}.gain"))?, bias: b.get(&format!("{p}.bias"))? })
        };
        let experts = (0..config.experts)
            .map(|j| {
                Ok(ExpertParams {
                    w1: b.get(&format!("expert.{j}.w1"))?,
                    b1: b.get(&format!("expert.{j}.b1"))?,
                    w2: b.get(&format!("expert.{j}.w2"))?,
                    b2: b.get(&format!("expert.{j}.b2"))?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(Self {
            embed: b.get("embed")?,
            pos_embed: if config.uses_positions() { Some(b.get("pos_embed")?) } else { None },
            ln1: norm("ln1")?,
            ln2: norm("ln2")?,
            ln_f: norm("ln_f")?,
            attn: AttentionParams {
                wq: b.get("attn.wq")?,
                bq: b.get("attn.bq")?,
                wk: b.get("attn.wk")?,
                bk: b.get("attn.bk")?,
                wv: b.get("attn.wv")?,
                bv: b.get("attn.bv")?,
                wo: b.get("attn.wo")?,
                bo: b.get("attn.bo")?,
            },
            router: b.get("router.w")?,
            experts,
            memory: if config.uses_memory() {
                Some(MemoryParams {
                    pool_queries: b.get("memory.pool_queries")?,
                    gate_w: b.get("memory.gate_w")?,
                    gate_b: b.get("memory.gate_b")?,
                })
            } else {
                None
            },
            structure: if config.disable_soes {
                None
            } else {
                Some(StructureParams { wq: b.get("struct.wq")?, wk: b.get("struct.wk")? })
            },
        })
    }
}
