use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsst::sparse::{argmax, entmax15, entmax15_jvp, softmax, sparsemax, sparsemax_jvp, Normalizer};

/// Euclidean projection onto the simplex by trying every support set: the
/// projection is `max(z − τ, 0)` for the unique non-empty `S` whose
/// `τ = (Σ_S z − 1)/|S|` keeps exactly `S` above the threshold.
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
    unreachable!("some support always satisfies the optimality conditions")
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sparsemax_matches_support_enumeration_on_1000_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..4.0);
        let z: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        worst = worst.max(max_diff(&sparsemax(&z).unwrap().probs, &projection_oracle(&z)));
    }
    assert!(worst <= 1e-8, "max deviation {worst}");
}

#[test]
fn documented_examples() {
    let d = sparsemax(&[0.7, 0.7, 0.7]).unwrap();
    assert!(d.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(sparsemax(&[2.0, 0.0]).unwrap().probs, vec![1.0, 0.0]);
    assert_eq!(entmax15(&[0.3, 0.3]).unwrap().probs, vec![0.5, 0.5]);
    let e = entmax15(&[5.0, 0.0]).unwrap();
    assert_eq!(e.support, vec![0]);
    assert!((e.probs[0] - 1.0).abs() < 1e-9);
    assert!(sparsemax(&[]).is_err());
    assert!(entmax15(&[1.0, f64::NAN]).is_err());
}

#[test]
fn jvp_degenerate_cases() {
    let full = sparsemax(&[0.1, 0.2, 0.15]).unwrap();
    assert_eq!(full.support.len(), 3);
    assert!(sparsemax_jvp(&full, &[2.0, 2.0, 2.0]).unwrap().iter().all(|g| g.abs() < 1e-15));
    let vertex = sparsemax(&[3.0, 0.0, -1.0]).unwrap();
    assert!(sparsemax_jvp(&vertex, &[1.0, -2.0, 5.0]).unwrap().iter().all(|&g| g == 0.0));
    let e = entmax15(&[0.2, 0.1, 0.3]).unwrap();
    assert!(entmax15_jvp(&e, &[4.0, 4.0, 4.0]).unwrap().iter().all(|g| g.abs() < 1e-12));
    let ev = entmax15(&[9.0, 0.0]).unwrap();
    assert!(entmax15_jvp(&ev, &[1.0, 3.0]).unwrap().iter().all(|&g| g == 0.0));
    assert!(sparsemax_jvp(&full, &[1.0]).is_err());
}

/// Central differences of `φ` contracted with `u`; `None` when the support
/// changes under a ±1e-4 perturbation of any coordinate.
fn fd_jvp(phi: Normalizer, z: &[f64], u: &[f64]) -> Option<Vec<f64>> {
    let base = phi.apply(z).unwrap().support;
    let h = 1e-6;
    let mut out = Vec::new();
    for i in 0..z.len() {
        for wide in [1e-4, -1e-4] {
            let mut w = z.to_vec();
            w[i] += wide;
            if phi.apply(&w).unwrap().support != base {
                return None;
            }
        }
        let (mut up, mut down) = (z.to_vec(), z.to_vec());
        up[i] += h;
        down[i] -= h;
        let f = |v: &[f64]| phi.apply(v).unwrap().probs.iter().zip(u).map(|(p, w)| p * w).sum::<f64>();
        out.push((f(&up) - f(&down)) / (2.0 * h));
    }
    Some(out)
}

#[test]
fn jvps_match_finite_differences_at_stable_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = [0usize; 2];
    for (slot, (phi, tol)) in [(Normalizer::Sparsemax, 1e-6), (Normalizer::Entmax15, 1e-5)].into_iter().enumerate() {
        for _ in 0..200 {
            let p = rng.random_range(2..=8);
            let z: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
            let u: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let Some(numeric) = fd_jvp(phi, &z, &u) else { continue };
            // the Jacobian is symmetric, so the VJP equals the JVP
            let analytic = phi.jvp(&phi.apply(&z).unwrap(), &u).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel <= tol, "{phi:?} z={z:?}: {a} vs {n}");
            }
            checked[slot] += 1;
        }
    }
    assert!(checked.iter().all(|&c| c >= 100), "{checked:?}");
}

#[test]
fn entmax_interpolates_between_sparsemax_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let p = rng.random_range(2..=12);
        let z: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e = entmax15(&z).unwrap();
        let s = sparsemax(&z).unwrap();
        assert!(s.support.iter().all(|i| e.support.contains(i)), "{z:?}");
        let spread = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) - z.iter().copied().fold(f64::INFINITY, f64::min);
        if spread >= 4.0 {
            let zeros = |d: &[f64]| d.iter().filter(|&&p| p == 0.0).count();
            assert!(zeros(&e.probs) >= zeros(&softmax(&z).unwrap().probs));
        }
    }
}

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..=16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn short_vectors_match_oracle(z in prop::collection::vec(-2.0f64..2.0, 1..=8)) {
        prop_assert!(max_diff(&sparsemax(&z).unwrap().probs, &projection_oracle(&z)) <= 1e-12);
    }

    #[test]
    fn distributions_are_normalized(z in vec_strategy()) {
        for phi in [Normalizer::Sparsemax, Normalizer::Entmax15] {
            let d = phi.apply(&z).unwrap();
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
            let support: Vec<usize> = (0..z.len()).filter(|&i| d.probs[i] > 0.0).collect();
            prop_assert_eq!(&support, &d.support);
        }
        let s = sparsemax(&z).unwrap();
        for (i, &v) in z.iter().enumerate() {
            prop_assert_eq!(s.probs[i], (v - s.threshold_tau).max(0.0));
        }
    }

    #[test]
    fn shift_invariance(z in vec_strategy(), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for phi in [Normalizer::Sparsemax, Normalizer::Entmax15] {
            prop_assert!(max_diff(&phi.apply(&z).unwrap().probs, &phi.apply(&shifted).unwrap().probs) <= 1e-10);
        }
    }

    #[test]
    fn argmax_is_preserved(z in vec_strategy()) {
        let top = argmax(&z).unwrap();
        let unique = z.iter().enumerate().all(|(i, &v)| i == top || v < z[top]);
        prop_assume!(unique);
        for phi in [Normalizer::Sparsemax, Normalizer::Entmax15] {
            prop_assert_eq!(argmax(&phi.apply(&z).unwrap().probs), Some(top));
        }
    }

    #[test]
    fn monotone_in_own_score(z in vec_strategy(), bump in 0.0f64..2.0, pick in 0usize..16) {
        let i = pick % z.len();
        let mut raised = z.clone();
        raised[i] += bump;
        for phi in [Normalizer::Sparsemax, Normalizer::Entmax15] {
            let before = phi.apply(&z).unwrap().probs[i];
            let after = phi.apply(&raised).unwrap().probs[i];
            prop_assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance(z in vec_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..z.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        for phi in [Normalizer::Sparsemax, Normalizer::Entmax15] {
            let a = phi.apply(&z).unwrap().probs;
            let b = phi.apply(&permuted).unwrap().probs;
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((b[k] - a[i]).abs() <= 1e-12);
            }
        }
    }
}
