#![allow(dead_code)]

use nalgebra::{dmatrix, DMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rate_alloc::network::{CoupledNetwork, Coupling, LinearSubsystem};

pub const R_MIN: f64 = 1e-3;

/// Scalar Riccati solution `2 a s - s^2 r + g2 = 0`, with `c = 1`.
pub fn scalar_sigma(a: f64, g2: f64, r: f64) -> f64 {
    (a + (a * a + r * g2).sqrt()) / r
}

/// `d/dr` of [`scalar_sigma`].
pub fn scalar_sigma_prime(a: f64, g2: f64, r: f64) -> f64 {
    let root = (a * a + r * g2).sqrt();
    (r * g2 / (2.0 * root) - (a + root)) / (r * r)
}

pub fn scalar_network(params: &[(f64, f64)]) -> CoupledNetwork {
    let subs = params
        .iter()
        .map(|&(a, g)| LinearSubsystem::scalar(a, g, 1.0).unwrap())
        .collect();
    CoupledNetwork::new(subs, vec![], 0.0, R_MIN).unwrap()
}

/// `(a, g)` per sensor; sensor 0 dominates at low capacity.
pub const ASYMMETRIC: [(f64, f64); 2] = [(-1.0, 2.0), (-0.5, 1.0)];
pub const SYMMETRIC: [(f64, f64); 2] = [(-1.0, 1.0), (-1.0, 1.0)];

pub fn asymmetric_pair() -> CoupledNetwork {
    scalar_network(&ASYMMETRIC)
}

pub fn symmetric_pair() -> CoupledNetwork {
    scalar_network(&SYMMETRIC)
}

/// Two scalar subsystems coupled both ways.
pub fn coupled_scalar_pair(epsilon: f64) -> CoupledNetwork {
    let subs = vec![
        LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(),
        LinearSubsystem::scalar(-2.0, 1.0, 1.0).unwrap(),
    ];
    let couplings = vec![
        Coupling {
            row: 0,
            col: 1,
            matrix: dmatrix![1.0],
        },
        Coupling {
            row: 1,
            col: 0,
            matrix: dmatrix![1.0],
        },
    ];
    CoupledNetwork::new(subs, couplings, epsilon, R_MIN).unwrap()
}

pub const THREE_SIGMA_MAX: f64 = 3.0;

/// Three two-state subsystems with a ring of couplings.
pub fn three_subsystem(epsilon: f64) -> CoupledNetwork {
    let subs = vec![
        LinearSubsystem::new(
            dmatrix![-1.0, 0.3; 0.0, -2.0],
            DMatrix::identity(2, 2),
            dmatrix![1.0; 0.5],
        )
        .unwrap(),
        LinearSubsystem::new(
            dmatrix![-0.5, 1.0; -1.0, -0.5],
            dmatrix![1.0, 0.0; 0.0, 0.5],
            dmatrix![1.0; 0.0],
        )
        .unwrap(),
        LinearSubsystem::new(
            dmatrix![-1.5, 0.0; 0.2, -0.8],
            dmatrix![1.0, 0.2; 0.0, 0.8],
            dmatrix![0.3; 1.0],
        )
        .unwrap(),
    ];
    let couplings = vec![
        Coupling {
            row: 0,
            col: 1,
            matrix: dmatrix![0.5, 0.0; 0.2, 0.3],
        },
        Coupling {
            row: 1,
            col: 2,
            matrix: dmatrix![0.0, 0.4; 0.3, 0.0],
        },
        Coupling {
            row: 2,
            col: 0,
            matrix: dmatrix![0.2, 0.1; 0.0, 0.5],
        },
    ];
    CoupledNetwork::new(subs, couplings, epsilon, R_MIN).unwrap()
}

/// Uniform point of `{gamma >= 0, sum gamma = sigma}`.
pub fn simplex_point(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| sigma * x / total).collect()
}

/// Uniform point of `{gamma >= 0, sum gamma <= sigma}`, kept off the faces.
pub fn hull_point(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let full = simplex_point(rng, n + 1, sigma);
    full[..n].iter().map(|x| x.max(1e-3 * sigma)).collect()
}

/// Capacity at which sensor 1 of the asymmetric pair switches on:
/// root of `eta_0'(sigma + r_min) = eta_1'(r_min)` by bisection.
pub fn asymmetric_breakpoint() -> f64 {
    let [(a0, g0), (a1, g1)] = ASYMMETRIC;
    let target = scalar_sigma_prime(a1, g1 * g1, R_MIN);
    let f = |s: f64| scalar_sigma_prime(a0, g0 * g0, s + R_MIN) - target;
    let (mut lo, mut hi) = (0.0, 10.0);
    assert!(f(lo) < 0.0 && f(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exhaustive search over `gamma_0` in steps of `step` on `Sp[sigma]` for a
/// decoupled scalar pair.
pub fn brute_force_pair(params: [(f64, f64); 2], sigma: f64, step: f64) -> [f64; 2] {
    let [(a0, g0), (a1, g1)] = params;
    let steps = (sigma / step).round() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=steps {
        let x = sigma * k as f64 / steps as f64;
        let eta =
            scalar_sigma(a0, g0 * g0, x + R_MIN) + scalar_sigma(a1, g1 * g1, sigma - x + R_MIN);
        if eta < best.0 {
            best = (eta, x);
        }
    }
    [best.1, sigma - best.1]
}
