//! AdamW with linear warmup, cosine decay and global-norm clipping.

use crate::error::Error;
use crate::model::parse_field;
use crate::tensor::Tensor;

/// Optimization settings. The defaults are desk-scale choices, not values
/// taken from any published run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Step at which the cosine reaches zero.
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Evaluations without dev improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub eval_every: usize,
    /// Stop once dev token accuracy reaches this value; 0 disables.
    pub stop_at_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            lr_peak: 3e-4,
            warmup_steps: 200,
            total_steps: 10_000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip_norm: 1.0,
            early_stop_patience: 0,
            eval_every: 250,
            stop_at_accuracy: 0.0,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "lr_peak",
    "warmup_steps",
    "total_steps",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "grad_clip_norm",
    "early_stop_patience",
    "eval_every",
    "stop_at_accuracy",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps: {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every: must be positive".into()));
        }
        for (key, v) in [("lr_peak", self.lr_peak), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key}: must be positive")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{key}: must lie in [0, 1)")));
            }
        }
        for (key, v) in [("weight_decay", self.weight_decay), ("grad_clip_norm", self.grad_clip_norm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key}: must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.stop_at_accuracy) {
            return Err(Error::Config("stop_at_accuracy: must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "steps" => self.steps = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "lr_peak" => self.lr_peak = parse_field(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_field(key, value)?,
            "total_steps" => self.total_steps = parse_field(key, value)?,
            "weight_decay" => self.weight_decay = parse_field(key, value)?,
            "beta1" => self.beta1 = parse_field(key, value)?,
            "beta2" => self.beta2 = parse_field(key, value)?,
            "eps" => self.eps = parse_field(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_field(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse_field(key, value)?,
            "eval_every" => self.eval_every = parse_field(key, value)?,
            "stop_at_accuracy" => self.stop_at_accuracy = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            _ => return Err(Error::Config(format!("{key}: unknown training key"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("stop_at_accuracy", self.stop_at_accuracy.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Learning rate at 1-based `step`: `lr·step/warmup` during warmup, then
/// `lr·½(1 + cos(π·progress))` with progress measured from the end of
/// warmup to `total_steps`, and zero afterwards.
pub fn learning_rate(config: &TrainConfig, step: usize) -> f64 {
    let (w, total) = (config.warmup_steps, config.total_steps);
    if step < w {
        return config.lr_peak * step as f64 / w as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - w) as f64 / (total - w).max(1) as f64;
    config.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Whether a parameter receives weight decay: matrices do, vectors (biases,
/// norm gains) do not.
pub fn decays(t: &Tensor) -> bool {
    t.shape().len() >= 2
}

/// One AdamW update at 1-based `step`:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)` with `λ` applied only where [`decays`].
/// Clipping happens before the moments are updated. A non-finite gradient
/// aborts with the parameter's name.
pub fn optimizer_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
    step: usize,
) -> Result<f64, Error> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("gradient of {} is {bad}", names[i]),
            });
        }
    }
    let norm = clip_global_norm(grads, config.grad_clip_norm);
    let lr = learning_rate(config, step);
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if decays(p) { config.weight_decay } else { 0.0 };
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + config.eps);
            *x -= lr * (update + decay * *x);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig { warmup_steps: 10, total_steps: 100, lr_peak: 0.5, ..TrainConfig::default() };
        assert_eq!(learning_rate(&c, 10), 0.5);
        assert_eq!(learning_rate(&c, 5), 0.25);
        assert!(learning_rate(&c, 100).abs() < 1e-15);
        assert_eq!(learning_rate(&c, 200), 0.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let c = TrainConfig { weight_decay: 0.0, warmup_steps: 0, ..TrainConfig::default() };
        let mut p = vec![Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = vec![vec![0.0, 0.0]];
        optimizer_step(&mut p, &["w".into()], &mut g, &mut s, &c, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let c = TrainConfig::default();
        let mut p = vec![Tensor::zeros(&[1])];
        let mut s = AdamState::new(&p);
        let mut g = vec![vec![f64::NAN]];
        let err = optimizer_step(&mut p, &["ln1.bias".into()], &mut g, &mut s, &c, 1).unwrap_err();
        assert!(err.to_string().contains("ln1.bias"));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
