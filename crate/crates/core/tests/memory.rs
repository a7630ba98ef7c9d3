use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsst::autodiff::Tape;
use rsst::memory::{gated_update, memory_kv, pool_segment, update_memory, GateMode, HierMemory, MemoryParams};
use rsst::Tensor;

fn params<'t>(tape: &'t Tape, m: usize, d: usize, gate_std: f64, rng: &mut ChaCha8Rng) -> MemoryParams<'t> {
    MemoryParams {
        pool_queries: tape.param(Tensor::randn(&[m, d], 1.0, rng)),
        gate_w: tape.param(Tensor::randn(&[2 * d, 1], gate_std, rng)),
        gate_b: tape.param(Tensor::randn(&[1], gate_std, rng)),
    }
}

/// Gate scale used by model initialization.
fn init_std(d: usize) -> f64 {
    1.0 / ((2 * d) as f64).sqrt()
}

#[test]
fn pooling_weights_are_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1, 3, 17] {
        let tape = Tape::new();
        let p = params(&tape, 5, 6, 0.3, &mut rng);
        let h = tape.constant(Tensor::randn(&[n, 6], 2.0, &mut rng));
        let (s, w) = pool_segment(h, p.pool_queries).unwrap();
        let w = w.to_tensor();
        assert_eq!(w.shape(), &[5, n]);
        for r in 0..5 {
            assert!(w.row(r).iter().all(|&x| x >= 0.0));
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..6 {
                let col: Vec<f64> = (0..n).map(|i| h.value()[i * 6 + c]).collect();
                let v = s.value()[r * 6 + c];
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn identical_tokens_pool_to_that_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let p = params(&tape, 4, 3, 0.3, &mut rng);
    let h = tape.constant(Tensor::from_rows(&vec![vec![0.25, -1.5, 3.0]; 9]).unwrap());
    let (s, _) = pool_segment(h, p.pool_queries).unwrap();
    for r in 0..4 {
        for (a, b) in s.value()[r * 3..r * 3 + 3].iter().zip([0.25, -1.5, 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
    assert!(pool_segment(tape.constant(Tensor::zeros(&[0, 3])), p.pool_queries).is_err());
}

#[test]
fn gated_update_is_an_elementwise_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (m, d) = (rng.random_range(1..6), rng.random_range(1..8));
        let tape = Tape::new();
        let p = params(&tape, m, d, 1.0, &mut rng);
        let prev = tape.constant(Tensor::randn(&[m, d], 2.0, &mut rng));
        let hat = tape.constant(Tensor::randn(&[m, d], 2.0, &mut rng));
        let (s, alpha) = gated_update(prev, hat, &p, GateMode::Learned).unwrap();
        assert_eq!(alpha.shape(), vec![m]);
        assert!(alpha.value().iter().all(|&a| a > 0.0 && a < 1.0));
        for ((v, a), b) in s.value().iter().zip(prev.value().iter()).zip(hat.value().iter()) {
            assert!(*v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
        }
    }
}

#[test]
fn gate_stays_open_for_large_finite_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let p = params(&tape, 3, 4, 1.0, &mut rng);
    let prev = tape.constant(Tensor::randn(&[3, 4], 5.0, &mut rng));
    let hat = tape.constant(Tensor::randn(&[3, 4], 5.0, &mut rng));
    let (_, alpha) = gated_update(prev, hat, &p, GateMode::Learned).unwrap();
    assert!(alpha.value().iter().all(|&a| a > 0.0 && a < 1.0), "{:?}", alpha.value());
}

#[test]
fn forced_gate_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let p = params(&tape, 3, 4, 1.0, &mut rng);
    let prev = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let hat = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let (keep, _) = gated_update(prev, hat, &p, GateMode::Forced(1.0)).unwrap();
    let (replace, _) = gated_update(prev, hat, &p, GateMode::Forced(0.0)).unwrap();
    assert_eq!(keep.value(), prev.value());
    assert_eq!(replace.value(), hat.value());
    let wrong = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(gated_update(prev, wrong, &p, GateMode::Learned).is_err());
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `S^t − Ŝ = α_t (S^{t−1} − Ŝ)` for a constant stream, so the distance to
/// the pooled summary shrinks monotonically whatever the gate does.
#[test]
fn constant_stream_contracts_toward_the_pooled_summary() {
    let mut steps_checked = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, d) = (7, 4, 8);
        let tape = Tape::new();
        let p = params(&tape, m, d, init_std(d), &mut rng);
        let h = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
        let start = tape.constant(Tensor::randn(&[m, d], 1.0, &mut rng));
        let (s_hat, _) = pool_segment(h, p.pool_queries).unwrap();
        let mut mem = HierMemory::with_segment(start);
        let mut prev = start.value().to_vec();
        let mut to_hat = dist(&prev, &s_hat.value());
        let mut step = f64::INFINITY;
        for _ in 0..10 {
            let (next, upd) = update_memory(h, &mem, &p, GateMode::Learned).unwrap();
            let s = next.segment().unwrap().value().to_vec();
            assert!(upd.alpha.as_ref().unwrap().iter().all(|&a| a > 0.0 && a < 1.0));
            let d_hat = dist(&s, &s_hat.value());
            let d_step = dist(&s, &prev);
            assert!(d_hat <= to_hat + 1e-12, "seed {seed}: {d_hat} > {to_hat}");
            // successive steps shrink too at init-scale gate weights
            assert!(d_step <= step + 1e-12, "seed {seed}: step {d_step} > {step}");
            (to_hat, step, prev, mem) = (d_hat, d_step, s, next);
            steps_checked += 1;
        }
    }
    assert_eq!(steps_checked, 200);
}

#[test]
fn segment_shape_is_independent_of_sequence_length() {
    let d = 6;
    for n in [4, 64, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let tape = Tape::new();
        let p = params(&tape, 8, d, init_std(d), &mut rng);
        let mut mem = HierMemory::new(8);
        for _ in 0..3 {
            let h = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
            mem = update_memory(h, &mem, &p, GateMode::Learned).unwrap().0;
            assert_eq!(mem.segment().unwrap().shape(), vec![8, d]);
        }
    }
}

#[test]
fn cache_and_key_rows_across_iterations() {
    let (n, m, d) = (32, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let p = params(&tape, m, d, init_std(d), &mut rng);
    let mut mem = HierMemory::new(m);
    assert!(memory_kv(&mem).unwrap().is_none());
    let h0 = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
    let (first, upd) = update_memory(h0, &mem, &p, GateMode::Learned).unwrap();
    assert!(upd.alpha.is_none());
    assert!(first.token_cache().is_none());
    let (s_hat, _) = pool_segment(h0, p.pool_queries).unwrap();
    assert_eq!(first.segment().unwrap().value(), s_hat.value());
    assert_eq!(memory_kv(&first).unwrap().unwrap().shape(), vec![m, d]);
    mem = first;
    let mut last = h0;
    for t in 1..6 {
        let h = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
        let (next, _) = update_memory(h, &mem, &p, GateMode::Learned).unwrap();
        let kv = memory_kv(&next).unwrap().unwrap();
        assert_eq!(kv.shape(), vec![n + m, d]);
        // the cache holds the states of the previous call
        let cache = next.token_cache().unwrap();
        assert_eq!(cache.value(), last.value());
        assert_eq!(&kv.value()[..n * d], &cache.value()[..]);
        last = h;
        assert_eq!(next.updates(), t + 1);
        assert_eq!(next.stored_rows(), 2 * n + m);
        mem = next;
    }
}

#[test]
fn token_cache_is_detached() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let p = params(&tape, 2, 3, init_std(3), &mut rng);
    let h0 = tape.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let h1 = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let (mem, _) = update_memory(h0, &HierMemory::new(2), &p, GateMode::Learned).unwrap();
    let (mem, _) = update_memory(h1, &mem, &p, GateMode::Learned).unwrap();
    let cache = mem.token_cache().unwrap();
    assert_eq!(cache.value(), h0.value());
    assert!(tape.backward(cache.sum()).is_err());
    let segment = mem.segment().unwrap().sum();
    let both = segment.add(cache.sum()).unwrap();
    let (ga, gb) = (tape.backward(segment).unwrap(), tape.backward(both).unwrap());
    let g = ga.get_or_zeros(h0);
    assert!(g.iter().any(|&x| x != 0.0));
    assert_eq!(g, gb.get_or_zeros(h0));
}

#[test]
fn slot_count_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::new();
    let p = params(&tape, 3, 2, 0.5, &mut rng);
    let h = tape.constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
    assert!(update_memory(h, &HierMemory::new(5), &p, GateMode::Learned).is_err());
}
