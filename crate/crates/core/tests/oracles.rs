mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rate_alloc::network::AllocationVector;
use rate_alloc::optimizer::{minimize_on_simplex, SolverOptions};
use rate_alloc::sensitivity::grad_eta;

use common::*;

#[test]
fn decoupled_cost_and_gradient_match_closed_forms() {
    let net = asymmetric_pair();
    for gamma in [[0.0, 0.0], [0.3, 0.7], [1.2, 0.05]] {
        let record = grad_eta(&AllocationVector::new(gamma.to_vec()).unwrap(), &net).unwrap();
        let mut eta = 0.0;
        for (i, &(a, g)) in ASYMMETRIC.iter().enumerate() {
            let r = gamma[i] + R_MIN;
            eta += scalar_sigma(a, g * g, r);
            let slope = scalar_sigma_prime(a, g * g, r);
            assert!((record.grad[i] - slope).abs() <= 1e-9 * slope.abs());
        }
        assert!((record.eta - eta).abs() <= 1e-10 * eta);
    }
}

#[test]
fn small_rate_slope_follows_the_leading_term() {
    // eta'(r) -> -g^4 / (8 |a|^3) as r -> 0.
    for &(a, g) in &ASYMMETRIC {
        let limit = -(g * g) * (g * g) / (8.0 * a.abs().powi(3));
        let slope = scalar_sigma_prime(a, g * g, 1e-6);
        assert!((slope - limit).abs() <= 1e-4 * limit.abs());
    }
}

#[test]
fn coupled_network_restarts_reach_one_minimizer() {
    let net = three_subsystem(0.1);
    let opts = SolverOptions::default();
    let reference = minimize_on_simplex(&net, 2.0, None, &opts).unwrap();
    assert!(reference.mu < 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let start = AllocationVector::new(simplex_point(&mut rng, 3, 2.0)).unwrap();
        let cert = minimize_on_simplex(&net, 2.0, Some(&start), &opts).unwrap();
        for i in 0..3 {
            assert!((cert.gamma()[i] - reference.gamma()[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn scalar_breakpoint_oracle_is_self_consistent() {
    let b = asymmetric_breakpoint();
    let [(a0, g0), (a1, g1)] = ASYMMETRIC;
    let lhs = scalar_sigma_prime(a0, g0 * g0, b + R_MIN);
    let rhs = scalar_sigma_prime(a1, g1 * g1, R_MIN);
    assert!((lhs - rhs).abs() < 1e-12);
    let grid = brute_force_pair(ASYMMETRIC, 0.5 * b, 1e-4);
    assert_eq!(grid[1], 0.0);
}
