use crate::attention::AttentionConfig;
use crate::error::Error;
use crate::sparse::Normalizer;

/// Which module an ablation removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    Memory,
    SparseAttention,
    Structure,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Memory, Module::SparseAttention, Module::Structure];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r2mu" | "memory" => Some(Module::Memory),
            "asam" | "attention" => Some(Module::SparseAttention),
            "soes" | "structure" => Some(Module::Structure),
            _ => None,
        }
    }

    /// Short name used in CLI flags and tables.
    pub fn tag(self) -> &'static str {
        match self {
            Module::Memory => "R2MU",
            Module::SparseAttention => "ASAM",
            Module::Structure => "SOES",
        }
    }
}

/// Model hyperparameters. Defaults are the desk-scale configuration; none of
/// the regularizer weights or the init scale come from published values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Recurrent iterations of the shared block.
    pub iterations: usize,
    pub k_top: usize,
    pub memory_slots: usize,
    pub experts: usize,
    pub active_experts: usize,
    pub phi: Normalizer,
    pub lambda_struct: f64,
    pub lambda_bias: f64,
    pub load_balance_coeff: f64,
    pub dropout_rate: f64,
    pub router_temp: f64,
    /// Width of the structure projections.
    pub struct_dim: usize,
    /// Rows of the positional table, used only when structure is disabled.
    pub max_positions: usize,
    pub disable_r2mu: bool,
    pub disable_asam: bool,
    pub disable_soes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            iterations: 4,
            k_top: 32,
            memory_slots: 16,
            experts: 8,
            active_experts: 2,
            phi: Normalizer::Entmax15,
            lambda_struct: 0.1,
            lambda_bias: 1.0,
            load_balance_coeff: 0.0,
            dropout_rate: 0.0,
            router_temp: 1.0,
            struct_dim: 16,
            max_positions: 1024,
            disable_r2mu: false,
            disable_asam: false,
            disable_soes: false,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`], in canonical order.
pub const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "n_heads",
    "K",
    "k_top",
    "m",
    "E",
    "e",
    "phi",
    "lambda_struct",
    "lambda_bias",
    "load_balance_coeff",
    "dropout_rate",
    "router_temp",
    "struct_dim",
    "max_positions",
    "disable_r2mu",
    "disable_asam",
    "disable_soes",
];

pub(crate) fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ModelConfig {
    /// Setting used in the reference experiments: 4 iterations, top-32 keys,
    /// 128 memory slots, 2 of 8 experts.
    pub fn paper_preset() -> Self {
        Self { iterations: 4, k_top: 32, memory_slots: 128, active_experts: 2, experts: 8, ..Self::default() }
    }

    /// Small setting for gradient checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 7,
            d_model: 8,
            n_heads: 2,
            iterations: 2,
            k_top: 4,
            memory_slots: 3,
            experts: 4,
            active_experts: 2,
            struct_dim: 4,
            max_positions: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("K", self.iterations),
            ("k_top", self.k_top),
            ("m", self.memory_slots),
            ("E", self.experts),
            ("e", self.active_experts),
            ("struct_dim", self.struct_dim),
            ("max_positions", self.max_positions),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key}: must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model: {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.active_experts > self.experts {
            return Err(Error::Config(format!("e: {} exceeds E = {}", self.active_experts, self.experts)));
        }
        for (key, v) in [
            ("lambda_struct", self.lambda_struct),
            ("lambda_bias", self.lambda_bias),
            ("load_balance_coeff", self.load_balance_coeff),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key}: must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate: must lie in [0, 1)".into()));
        }
        if !(self.router_temp > 0.0 && self.router_temp.is_finite()) {
            return Err(Error::Config("router_temp: must be positive".into()));
        }
        Ok(())
    }

    /// Attention settings after ablations: the dense path keeps every key,
    /// uses softmax, and activates every expert.
    pub fn attention(&self) -> AttentionConfig {
        let dense = self.disable_asam;
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            k_top: if dense { usize::MAX } else { self.k_top },
            normalizer: if dense { Normalizer::Softmax } else { self.phi },
            experts: self.experts,
            active_experts: if dense { self.experts } else { self.active_experts },
            router_temp: self.router_temp,
        }
    }

    pub fn effective_lambda_bias(&self) -> f64 {
        if self.disable_soes { 0.0 } else { self.lambda_bias }
    }

    pub fn effective_lambda_struct(&self) -> f64 {
        if self.disable_soes { 0.0 } else { self.lambda_struct }
    }

    pub fn uses_positions(&self) -> bool {
        self.disable_soes
    }

    pub fn uses_memory(&self) -> bool {
        !self.disable_r2mu
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "vocab_size" => self.vocab_size = parse_field(key, value)?,
            "d_model" => self.d_model = parse_field(key, value)?,
            "n_heads" => self.n_heads = parse_field(key, value)?,
            "K" => self.iterations = parse_field(key, value)?,
            "k_top" => self.k_top = parse_field(key, value)?,
            "m" => self.memory_slots = parse_field(key, value)?,
            "E" => self.experts = parse_field(key, value)?,
            "e" => self.active_experts = parse_field(key, value)?,
            "phi" => {
                self.phi = Normalizer::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("phi: unknown mapping {value:?}")))?
            }
            "lambda_struct" => self.lambda_struct = parse_field(key, value)?,
            "lambda_bias" => self.lambda_bias = parse_field(key, value)?,
            "load_balance_coeff" => self.load_balance_coeff = parse_field(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_field(key, value)?,
            "router_temp" => self.router_temp = parse_field(key, value)?,
            "struct_dim" => self.struct_dim = parse_field(key, value)?,
            "max_positions" => self.max_positions = parse_field(key, value)?,
            "disable_r2mu" => self.disable_r2mu = parse_field(key, value)?,
            "disable_asam" => self.disable_asam = parse_field(key, value)?,
            "disable_soes" => self.disable_soes = parse_field(key, value)?,
            _ => return Err(Error::Config(format!("{key}: unknown model key"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("K", self.iterations.to_string()),
            ("k_top", self.k_top.to_string()),
            ("m", self.memory_slots.to_string()),
            ("E", self.experts.to_string()),
            ("e", self.active_experts.to_string()),
            ("phi", self.phi.name().to_string()),
            ("lambda_struct", self.lambda_struct.to_string()),
            ("lambda_bias", self.lambda_bias.to_string()),
            ("load_balance_coeff", self.load_balance_coeff.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("router_temp", self.router_temp.to_string()),
            ("struct_dim", self.struct_dim.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("disable_r2mu", self.disable_r2mu.to_string()),
            ("disable_asam", self.disable_asam.to_string()),
            ("disable_soes", self.disable_soes.to_string()),
        ]
    }
}

/// Copy of `config` with `which` removed. Removing structure zeroes both
/// structure weights and adds a learned positional table so the model keeps
/// access to token order.
pub fn ablate(config: &ModelConfig, which: Module) -> ModelConfig {
    let mut c = config.clone();
    match which {
        Module::Memory => c.disable_r2mu = true,
        Module::SparseAttention => {
            c.disable_asam = true;
            c.phi = Normalizer::Softmax;
            c.active_experts = c.experts;
        }
        Module::Structure => {
            c.disable_soes = true;
            c.lambda_bias = 0.0;
            c.lambda_struct = 0.0;
        }
    }
    c
}
