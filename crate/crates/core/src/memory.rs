//! Two-level memory read by every recurrent iteration.
//!
//! The token cache holds a gradient-detached copy of the previous
//! iteration's token states. The segment memory `S` holds `m` slots that
//! summarize the current states by attention pooling and fold in history
//! through a per-slot gate: `S ← α ⊙ S + (1 − α) ⊙ Ŝ`.

use crate::autodiff::{concat_rows, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Learned memory parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct MemoryParams<'t> {
    /// `m × d` pooling queries, one per slot.
    pub pool_queries: Var<'t>,
    /// `2d × 1` gate weights over `[S_prev ‖ Ŝ]`.
    pub gate_w: Var<'t>,
    /// `[1]` gate bias.
    pub gate_b: Var<'t>,
}

/// How the update gate is produced. `Forced` exists for tests of the
/// gate endpoints; models always run `Learned`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum GateMode {
    #[default]
    Learned,
    Forced(f64),
}

#[derive(Clone, Debug)]
pub struct HierMemory<'t> {
    slots: usize,
    token_cache: Option<Var<'t>>,
    latest: Option<Var<'t>>,
    segment: Option<Var<'t>>,
    updates: usize,
    attached: bool,
}

/// Diagnostics of one memory update.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryUpdate {
    /// Per-slot gate, absent on the initializing update.
    pub alpha: Option<Vec<f64>>,
    /// `m × n` pooling weights.
    pub pool_weights: Tensor,
}

impl<'t> HierMemory<'t> {
    pub fn new(slots: usize) -> Self {
        Self { slots, token_cache: None, latest: None, segment: None, updates: 0, attached: false }
    }

    /// Memory whose token cache keeps its gradient path. Only gradient
    /// checking uses this, so that finite differences and backprop see the
    /// same function.
    pub fn attached(slots: usize) -> Self {
        Self { attached: true, ..Self::new(slots) }
    }

    /// Memory whose segment slots start from `s` instead of the first pooling.
    pub fn with_segment(s: Var<'t>) -> Self {
        let slots = s.shape()[0];
        Self { segment: Some(s), ..Self::new(slots) }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn token_cache(&self) -> Option<Var<'t>> {
        self.token_cache
    }

    pub fn segment(&self) -> Option<Var<'t>> {
        self.segment
    }

    /// Number of `d`-wide rows held: cache rows plus the state staged for
    /// the next cache plus `m`. Independent of how many updates ran.
    pub fn stored_rows(&self) -> usize {
        let rows = |v: &Option<Var<'t>>| v.map_or(0, |v| v.shape()[0]);
        rows(&self.token_cache) + rows(&self.latest) + rows(&self.segment)
    }
}

/// Attention-weighted pooling: `Ŝ[s] = Σ_i softmax_i(q_s·h_i/√d) h_i`.
/// Returns `Ŝ [m×d]` and the weights `[m×n]`.
pub fn pool_segment<'t>(h: Var<'t>, pool_queries: Var<'t>) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let shape = h.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::Contract("pool_segment needs at least one token".into()));
    }
    let d = shape[1] as f64;
    let weights = pool_queries.matmul(h.transpose()?)?.scale(1.0 / d.sqrt()).softmax_rows()?;
    Ok((weights.matmul(h)?, weights))
}

/// `α = sigmoid([S_prev ‖ Ŝ]·w + b)` per slot, then
/// `S_new = α ⊙ S_prev + (1 − α) ⊙ Ŝ`. Returns `S_new` and `α [m]`.
pub fn gated_update<'t>(
    s_prev: Var<'t>,
    s_hat: Var<'t>,
    params: &MemoryParams<'t>,
    mode: GateMode,
) -> Result<(Var<'t>, Var<'t>), TensorError> {
    if s_prev.shape() != s_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gated_update",
            left: s_prev.shape(),
            right: s_hat.shape(),
        });
    }
    let m = s_prev.shape()[0];
    let alpha = match mode {
        GateMode::Learned => s_prev
            .concat_cols(s_hat)?
            .matmul(params.gate_w)?
            .add(params.gate_b)?
            .sigmoid()
            .reshape(vec![m])?,
        GateMode::Forced(a) => s_prev.tape().constant(Tensor::full(&[m], a)),
    };
    let one_minus = s_prev.tape().constant(Tensor::ones(&[m])).sub(alpha)?;
    let s_new = s_prev.mul_rows(alpha)?.add(s_hat.mul_rows(one_minus)?)?;
    Ok((s_new, alpha))
}

/// One memory step from the current token states `h [n×d]`. The cache
/// exposed afterwards holds the states of the previous call; the first call
/// initializes `S` to the pooled summary without gating.
pub fn update_memory<'t>(
    h: Var<'t>,
    mem: &HierMemory<'t>,
    params: &MemoryParams<'t>,
    mode: GateMode,
) -> Result<(HierMemory<'t>, MemoryUpdate), TensorError> {
    let (s_hat, weights) = pool_segment(h, params.pool_queries)?;
    if s_hat.shape()[0] != mem.slots {
        return Err(TensorError::Contract(format!(
            "memory has {} slots but {} pooling queries",
            mem.slots,
            s_hat.shape()[0]
        )));
    }
    let (segment, alpha) = match mem.segment {
        None => (s_hat, None),
        Some(prev) => {
            let (s_new, alpha) = gated_update(prev, s_hat, params, mode)?;
            (s_new, Some(alpha.value().to_vec()))
        }
    };
    let next = HierMemory {
        slots: mem.slots,
        token_cache: mem.latest,
        latest: Some(if mem.attached { h } else { h.detach() }),
        segment: Some(segment),
        updates: mem.updates + 1,
        attached: mem.attached,
    };
    Ok((next, MemoryUpdate { alpha, pool_weights: weights.to_tensor() }))
}

/// Extra key/value rows: `token_cache ‖ S`, or `None` before initialization.
pub fn memory_kv<'t>(mem: &HierMemory<'t>) -> Result<Option<Var<'t>>, TensorError> {
    match (mem.token_cache, mem.segment) {
        (None, None) => Ok(None),
        (Some(c), None) => Ok(Some(c)),
        (None, Some(s)) => Ok(Some(s)),
        (Some(c), Some(s)) => Ok(Some(concat_rows(c.tape(), &[c, s])?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params<'t>(tape: &'t Tape, m: usize, d: usize, rng: &mut ChaCha8Rng) -> MemoryParams<'t> {
        MemoryParams {
            pool_queries: tape.param(Tensor::randn(&[m, d], 1.0, rng)),
            gate_w: tape.param(Tensor::randn(&[2 * d, 1], 0.3, rng)),
            gate_b: tape.param(Tensor::zeros(&[1])),
        }
    }

    #[test]
    fn single_token_pools_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let p = params(&tape, 4, 3, &mut rng);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let (s, _) = pool_segment(h, p.pool_queries).unwrap();
        for r in 0..4 {
            assert_eq!(&s.value()[r * 3..r * 3 + 3], &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn gate_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let p = params(&tape, 3, 4, &mut rng);
        let prev = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let hat = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let (keep, _) = gated_update(prev, hat, &p, GateMode::Forced(1.0)).unwrap();
        assert_eq!(*keep.value(), *prev.value());
        let (replace, _) = gated_update(prev, hat, &p, GateMode::Forced(0.0)).unwrap();
        assert_eq!(*replace.value(), *hat.value());
    }

    #[test]
    fn first_update_initializes_without_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let p = params(&tape, 2, 4, &mut rng);
        let h = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let mem = HierMemory::new(2);
        assert!(memory_kv(&mem).unwrap().is_none());
        let (mem, upd) = update_memory(h, &mem, &p, GateMode::Learned).unwrap();
        assert!(upd.alpha.is_none());
        let (s_hat, _) = pool_segment(h, p.pool_queries).unwrap();
        assert_eq!(*mem.segment().unwrap().value(), *s_hat.value());
        assert_eq!(memory_kv(&mem).unwrap().unwrap().shape(), vec![2, 4]);
        let (mem, upd) = update_memory(h, &mem, &p, GateMode::Learned).unwrap();
        assert!(upd.alpha.unwrap().iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(memory_kv(&mem).unwrap().unwrap().shape(), vec![7, 4]);
    }
}
