//! Exhaustive-enumeration and finite-difference oracles for the lattice kernels.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rnnt_delay::check::{random_lattice, rel_err};
use rnnt_delay::lattice::{logaddexp, logsumexp};

#[test]
fn forward_matches_enumeration_on_200_random_lattices() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        let total = lat.total_log_prob();
        let scores: Vec<f64> =
            lat.enumerate_paths().unwrap().into_iter().map(|(_, lp)| lp).collect();
        assert!((total - logsumexp(&scores)).abs() < 1e-8);
    }
}

#[test]
fn cut_identity_holds_at_every_frame_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..50 {
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        let alpha = lat.forward();
        let beta = lat.backward();
        let total = alpha.at(lat.num_frames(), lat.num_labels());
        for t in 0..lat.num_frames() {
            let mut cut = f64::NEG_INFINITY;
            for u in 0..=lat.num_labels() {
                cut = logaddexp(cut, alpha.at(t, u) + lat.blank_weight(t, u) + beta.at(t + 1, u));
            }
            assert!((cut - total).abs() < 1e-8, "cut at t={t}: {cut} vs {total}");
        }
    }
}

#[test]
fn nll_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..10 {
        let lat = random_lattice(&mut rng, 5, 2, 4, true);
        let res = lat.nll_loss().unwrap();
        let h = 1e-5;
        for i in 0..res.grad.len() {
            let mut plus = lat.clone();
            plus.logp_raw_mut()[i] += h;
            let mut minus = lat.clone();
            minus.logp_raw_mut()[i] -= h;
            let fd = (plus.nll_loss().unwrap().loss - minus.nll_loss().unwrap().loss) / (2.0 * h);
            assert!(
                rel_err(res.grad[i], fd) < 1e-5,
                "entry {i}: analytic {} vs fd {fd}",
                res.grad[i]
            );
        }
    }
}

#[test]
fn posterior_mass_equals_path_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..50 {
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        let res = lat.nll_loss().unwrap();
        let mass: f64 = res.grad.iter().map(|g| -g).sum();
        let expect = (lat.num_frames() + lat.num_labels()) as f64;
        assert!((mass - expect).abs() < 1e-6);
    }
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let lat = random_lattice(&mut rng, 8, 4, 5, false);
    let a1 = lat.forward();
    let a2 = lat.forward();
    for (x, y) in a1.values().iter().zip(a2.values()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    let g1 = lat.nll_loss().unwrap();
    let g2 = lat.nll_loss().unwrap();
    assert_eq!(g1.loss.to_bits(), g2.loss.to_bits());
    for (x, y) in g1.grad.iter().zip(&g2.grad) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Forward total equals the enumeration oracle on arbitrary small lattices.
    #[test]
    fn prop_forward_equals_enumeration(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = random_lattice(&mut rng, 6, 3, 4, false);
        let total = lat.total_log_prob();
        let scores: Vec<f64> =
            lat.enumerate_paths().unwrap().into_iter().map(|(_, lp)| lp).collect();
        prop_assert!((total - logsumexp(&scores)).abs() < 1e-8);
    }

    /// Backward total equals forward total.
    #[test]
    fn prop_backward_equals_forward(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        let alpha = lat.forward();
        let beta = lat.backward();
        let diff = (alpha.at(lat.num_frames(), lat.num_labels()) - beta.at(0, 0)).abs();
        prop_assert!(diff < 1e-8);
    }
}
