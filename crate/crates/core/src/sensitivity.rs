//! Derivatives of the Riccati solution with respect to sampling rate.
//!
//! Two families live here. For a single triplet `(A, c, P)` and scalar rate `r`
//! we return `Sigma(r)` with its first two derivatives and decide regularity,
//! i.e. controllability of `(A, Sigma(r) c)`. For the network we return the
//! gradient of `eta(gamma) = tr Sigma(gamma)` via one Lyapunov solve per
//! sensor, and a finite-difference Hessian built on that gradient.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CareProblem, LyapunovOperator};
use crate::network::{AllocationVector, CoupledNetwork};

/// Rate used to decide regularity; the verdict is re-checked at [`CHECK_RATE`].
pub const PROBE_RATE: f64 = 1.0;
pub const CHECK_RATE: f64 = 2.0;

/// Eigenvalues below this fraction of the matrix norm count as zero when
/// classifying a definite sign as strict.
pub const STRICT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularTripletReport {
    pub is_regular: bool,
    pub probe_rate: f64,
    /// n-th singular value of the controllability matrix of `(A, Sigma(probe) c)`.
    pub controllability_margin: f64,
    /// Whether the verdict at [`CHECK_RATE`] agreed with the probe.
    pub rate_independent: bool,
}

fn check_triplet(a: &DMatrix<f64>, c: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<()> {
    if !linalg::is_observable(a, c).full_rank {
        return Err(Error::Domain("(A, c) is not observable".into()));
    }
    if !linalg::is_symmetric(p, 1e-12) {
        return Err(Error::Domain("P is not symmetric".into()));
    }
    let lo = linalg::min_sym_eigenvalue(p);
    if !(lo > 0.0) {
        return Err(Error::Domain(format!(
            "P is not positive definite (min eigenvalue {lo:.3e})"
        )));
    }
    Ok(())
}

fn rate_care(a: &DMatrix<f64>, c: &DMatrix<f64>, p: &DMatrix<f64>, r: f64) -> Result<DMatrix<f64>> {
    let s = c * c.transpose() * r;
    linalg::solve_care(&CareProblem::new(a.clone(), s, p.clone())?)
}

/// Controllability of `(A, Sigma(r) c)` at the probe rate, cross-checked at a second rate.
pub fn is_regular_triplet(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<RegularTripletReport> {
    check_triplet(a, c, p)?;
    let verdict = |r: f64| -> Result<linalg::RankTest> {
        let sigma = rate_care(a, c, p, r)?;
        Ok(linalg::is_controllable(a, &(sigma * c)))
    };
    let probe = verdict(PROBE_RATE)?;
    let check = verdict(CHECK_RATE)?;
    Ok(RegularTripletReport {
        is_regular: probe.full_rank,
        probe_rate: PROBE_RATE,
        controllability_margin: probe.min_singular_value,
        rate_independent: probe.full_rank == check.full_rank,
    })
}

#[derive(Debug, Clone)]
pub struct RateDerivatives {
    pub sigma: DMatrix<f64>,
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
}

/// `Sigma(r)`, `Sigma'(r)` and `Sigma''(r)` for `A S + S A^T - r S c c^T S + P = 0`.
///
/// `Sigma'` solves the closed-loop Lyapunov equation with forcing
/// `-Sigma c c^T Sigma`. `Sigma''` goes through the information matrix
/// `K = Sigma^{-1}`: `K' = -K Sigma' K`, `K''` from its own Lyapunov
/// equation, then `Sigma'' = 2 Sigma K' Sigma K' Sigma - Sigma K'' Sigma`.
pub fn sigma_rate_derivatives(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
    r: f64,
) -> Result<RateDerivatives> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidInput(format!(
            "rate must be positive, got {r}"
        )));
    }
    check_triplet(a, c, p)?;
    let sigma = rate_care(a, c, p, r)?;
    let cc = c * c.transpose();
    let closed = a - &sigma * &cc * r;
    let first = LyapunovOperator::new(&closed)
        .map_err(internal)?
        .solve(&(-(&sigma * &cc * &sigma)))?;

    let info = linalg::symmetrize(
        &sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NumericalFailure("Riccati solution is singular".into()))?,
    );
    let info_d1 = -(&info * &first * &info);
    // (-A^T - K P) is similar to the closed loop through K.
    let info_loop = -a.transpose() - &info * p;
    let info_d2 = LyapunovOperator::new(&info_loop)
        .map_err(internal)?
        .solve(&(-(&info_d1 * p * &info_d1) * 2.0))?;
    let second = linalg::symmetrize(
        &(&sigma * &info_d1 * &sigma * &info_d1 * &sigma * 2.0 - &sigma * &info_d2 * &sigma),
    );
    Ok(RateDerivatives {
        sigma,
        first,
        second,
    })
}

fn internal(e: Error) -> Error {
    match e {
        Error::SolverPrecondition(msg) => {
            Error::NumericalFailure(format!("closed loop is not Hurwitz: {msg}"))
        }
        other => other,
    }
}

/// Semidefinite sign classification of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignProfile {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub scale: f64,
}

impl SignProfile {
    pub fn of(m: &DMatrix<f64>) -> Self {
        Self {
            min_eigenvalue: linalg::min_sym_eigenvalue(m),
            max_eigenvalue: linalg::max_sym_eigenvalue(m),
            scale: m.norm(),
        }
    }

    pub fn strictly_negative(&self) -> bool {
        self.max_eigenvalue < -STRICT_TOL * self.scale
    }

    pub fn strictly_positive(&self) -> bool {
        self.min_eigenvalue > STRICT_TOL * self.scale
    }
}

#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub gamma: AllocationVector,
    pub eta: f64,
    /// `d eta / d gamma_i`.
    pub grad: Vec<f64>,
    /// `d Sigma / d gamma_i`.
    pub sigma_prime: Vec<DMatrix<f64>>,
}

/// Gradient of `eta` at `alloc`, one Lyapunov solve per sensor against a shared factorization.
pub fn grad_eta(alloc: &AllocationVector, network: &CoupledNetwork) -> Result<GradientRecord> {
    let problem = network.care_problem(alloc)?;
    let sigma = linalg::solve_care(&problem)?;
    let closed = problem.closed_loop(&sigma);
    let op = LyapunovOperator::new(&closed).map_err(internal)?;
    let mut grad = Vec::with_capacity(network.len());
    let mut sigma_prime = Vec::with_capacity(network.len());
    for i in 0..network.len() {
        let forcing = -(&sigma * network.block_selector(i) * &sigma);
        let d = op.solve(&forcing)?;
        grad.push(d.trace());
        sigma_prime.push(d);
    }
    Ok(GradientRecord {
        gamma: alloc.clone(),
        eta: sigma.trace(),
        grad,
        sigma_prime,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    #[serde(skip)]
    pub hessian: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub positive_definite: bool,
    /// Diagonal dominance of the full inverse; `None` when singular.
    pub inverse_diagonally_dominant: Option<bool>,
    pub warnings: Vec<String>,
}

impl HessianReport {
    /// Diagonal dominance of the inverse of the principal submatrix on `indices`.
    pub fn principal_inverse_dominance(&self, indices: &[usize]) -> Option<bool> {
        let k = indices.len();
        if k == 0 || indices.iter().any(|&i| i >= self.hessian.nrows()) {
            return None;
        }
        let sub = DMatrix::from_fn(k, k, |r, c| self.hessian[(indices[r], indices[c])]);
        sub.try_inverse().map(|inv| is_diagonally_dominant(&inv))
    }
}

pub fn is_diagonally_dominant(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| {
        let off: f64 = (0..m.ncols())
            .filter(|&j| j != i)
            .map(|j| m[(i, j)].abs())
            .sum();
        m[(i, i)].abs() >= off
    })
}

/// Hessian of `eta` by central differences of [`grad_eta`], symmetrized.
///
/// Coordinates within `h` of the domain edge `gamma_i = -r_min` fall back to a
/// forward difference and are flagged in the warnings.
pub fn hessian_eta(
    alloc: &AllocationVector,
    network: &CoupledNetwork,
    h: f64,
) -> Result<HessianReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!(
            "step must be positive, got {h}"
        )));
    }
    network.check_domain(alloc)?;
    let n = network.len();
    let r_min = network.r_min();
    let mut warnings = Vec::new();
    let scale = alloc.gamma().iter().fold(1.0f64, |m, g| m.max(g.abs()));
    if h < 1e-9 * scale {
        warnings.push(format!(
            "step {h:.3e} is near roundoff for |gamma| ~ {scale:.3e}"
        ));
    }

    let columns: Vec<Result<(Vec<f64>, bool)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let plus = grad_eta(&alloc.with_offset(j, h), network)?.grad;
            if alloc.gamma()[j] - h + r_min > 0.0 {
                let minus = grad_eta(&alloc.with_offset(j, -h), network)?.grad;
                Ok((
                    plus.iter()
                        .zip(&minus)
                        .map(|(p, m)| (p - m) / (2.0 * h))
                        .collect(),
                    false,
                ))
            } else {
                let here = grad_eta(alloc, network)?.grad;
                Ok((
                    plus.iter().zip(&here).map(|(p, m)| (p - m) / h).collect(),
                    true,
                ))
            }
        })
        .collect();

    let mut raw = DMatrix::zeros(n, n);
    for (j, col) in columns.into_iter().enumerate() {
        let (values, forward) = col?;
        if forward {
            warnings.push(format!(
                "coordinate {j} is within h of the domain edge; used a forward difference"
            ));
        }
        for (i, v) in values.into_iter().enumerate() {
            raw[(i, j)] = v;
        }
    }
    let hessian = linalg::symmetrize(&raw);
    let asym = linalg::asymmetry(&raw);
    if asym > 1e-4 * hessian.amax().max(f64::MIN_POSITIVE) {
        warnings.push(format!(
            "finite-difference Hessian is noticeably asymmetric ({asym:.3e}); step may be ill-conditioned"
        ));
    }
    let min_eigenvalue = linalg::min_sym_eigenvalue(&hessian);
    let inverse_diagonally_dominant = hessian
        .clone()
        .try_inverse()
        .map(|inv| is_diagonally_dominant(&inv));
    Ok(HessianReport {
        positive_definite: min_eigenvalue > 0.0,
        min_eigenvalue,
        inverse_diagonally_dominant,
        hessian,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Coupling, LinearSubsystem};
    use nalgebra::dmatrix;

    fn irregular_triplet() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            dmatrix![-1.0, 0.0; 0.0, -2.0],
            dmatrix![1.0; 1.0],
            dmatrix![5.0, -3.0; -3.0, 4.0],
        )
    }

    // Closed forms for a scalar triplet with c = 1.
    fn scalar_sigma(a: f64, g2: f64, r: f64) -> f64 {
        (a + (a * a + r * g2).sqrt()) / r
    }
    fn scalar_sigma_d1(a: f64, g2: f64, r: f64) -> f64 {
        let root = (a * a + r * g2).sqrt();
        (r * g2 / (2.0 * root) - (a + root)) / (r * r)
    }

    #[test]
    fn irregular_triplet_is_detected() {
        let (a, c, p) = irregular_triplet();
        let report = is_regular_triplet(&a, &c, &p).unwrap();
        assert!(!report.is_regular);
        assert!(report.controllability_margin <= 1e-10);
        assert!(report.rate_independent);
    }

    #[test]
    fn scalar_triplet_is_regular() {
        let report = is_regular_triplet(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![2.0]).unwrap();
        assert!(report.is_regular);
    }

    #[test]
    fn regularity_requires_observability_and_definite_noise() {
        let a = dmatrix![-1.0, 0.0; 0.0, -2.0];
        let r = is_regular_triplet(&a, &dmatrix![1.0; 0.0], &DMatrix::identity(2, 2));
        assert!(matches!(r, Err(Error::Domain(_))));
        let r = is_regular_triplet(&a, &dmatrix![1.0; 1.0], &dmatrix![1.0, 0.0; 0.0, 0.0]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_rate_derivative_matches_closed_form() {
        let d =
            sigma_rate_derivatives(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![2.0], 1.0).unwrap();
        assert!((d.sigma[(0, 0)] - (3f64.sqrt() - 1.0)).abs() < 1e-13);
        let exact = scalar_sigma_d1(-1.0, 2.0, 1.0);
        assert!((exact - (1.0 / 3f64.sqrt() - (3f64.sqrt() - 1.0))).abs() < 1e-15);
        assert!((d.first[(0, 0)] - exact).abs() < 1e-12);
        assert!((d.first[(0, 0)] + 0.1547005).abs() < 1e-6);
    }

    #[test]
    fn scalar_second_derivative_matches_finite_difference_of_closed_form() {
        let h = 1e-4;
        let r = 0.7;
        let fd = (scalar_sigma(-0.5, 3.0, r + h) - 2.0 * scalar_sigma(-0.5, 3.0, r)
            + scalar_sigma(-0.5, 3.0, r - h))
            / (h * h);
        let d = sigma_rate_derivatives(&dmatrix![-0.5], &dmatrix![1.0], &dmatrix![3.0], r).unwrap();
        assert!((d.second[(0, 0)] - fd).abs() < 1e-5 * fd.abs());
        assert!(d.second[(0, 0)] > 0.0);
    }

    #[test]
    fn first_derivative_matches_finite_difference() {
        let a = dmatrix![-0.3, 1.0, 0.0; -1.0, -0.3, 0.5; 0.2, 0.0, -1.0];
        let c = dmatrix![1.0; 0.2; -0.4];
        let p = dmatrix![1.0, 0.1, 0.0; 0.1, 2.0, 0.3; 0.0, 0.3, 0.5];
        let r = 1.3;
        let h = 1e-5;
        let d = sigma_rate_derivatives(&a, &c, &p, r).unwrap();
        let plus = rate_care(&a, &c, &p, r + h).unwrap();
        let minus = rate_care(&a, &c, &p, r - h).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        assert!((&d.first - &fd).norm() <= 1e-5 * fd.norm());
    }

    #[test]
    fn irregular_first_derivative_is_singular() {
        let (a, c, p) = irregular_triplet();
        let d = sigma_rate_derivatives(&a, &c, &p, 1.0).unwrap();
        let sign = SignProfile::of(&d.first);
        assert!(sign.max_eigenvalue <= 1e-12);
        assert!(!sign.strictly_negative());
        assert!(sign.max_eigenvalue.abs() <= 1e-10 * sign.scale);
    }

    fn decoupled_pair() -> CoupledNetwork {
        CoupledNetwork::new(
            vec![
                LinearSubsystem::scalar(-1.0, 2.0, 1.0).unwrap(),
                LinearSubsystem::scalar(-0.5, 1.0, 1.0).unwrap(),
            ],
            vec![],
            0.0,
            1e-3,
        )
        .unwrap()
    }

    #[test]
    fn decoupled_gradient_matches_scalar_derivatives() {
        let net = decoupled_pair();
        let alloc = AllocationVector::new(vec![0.4, 1.2]).unwrap();
        let rec = grad_eta(&alloc, &net).unwrap();
        let g0 = scalar_sigma_d1(-1.0, 4.0, 0.401);
        let g1 = scalar_sigma_d1(-0.5, 1.0, 1.201);
        assert!((rec.grad[0] - g0).abs() < 1e-11);
        assert!((rec.grad[1] - g1).abs() < 1e-11);
        // Sensor 0 only moves block 0.
        assert!(rec.sigma_prime[0][(1, 1)].abs() < 1e-14);
        assert!(rec.sigma_prime[0][(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences_coupled() {
        let net = CoupledNetwork::new(
            vec![
                LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(),
                LinearSubsystem::scalar(-2.0, 1.5, 0.8).unwrap(),
                LinearSubsystem::scalar(-0.7, 0.6, 1.2).unwrap(),
            ],
            vec![
                Coupling {
                    row: 0,
                    col: 1,
                    matrix: dmatrix![1.0],
                },
                Coupling {
                    row: 2,
                    col: 0,
                    matrix: dmatrix![-0.5],
                },
                Coupling {
                    row: 1,
                    col: 2,
                    matrix: dmatrix![0.3],
                },
            ],
            0.1,
            1e-3,
        )
        .unwrap();
        let alloc = AllocationVector::new(vec![0.3, 0.9, 0.5]).unwrap();
        let rec = grad_eta(&alloc, &net).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let fd = (net.eta(&alloc.with_offset(i, h)).unwrap()
                - net.eta(&alloc.with_offset(i, -h)).unwrap())
                / (2.0 * h);
            assert!(
                (rec.grad[i] - fd).abs() <= 1e-6 * fd.abs(),
                "{i}: {} vs {fd}",
                rec.grad[i]
            );
            assert!(rec.grad[i] < 0.0);
            assert!((rec.sigma_prime[i].trace() - rec.grad[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_network_gradient_is_symmetric() {
        let net = CoupledNetwork::new(
            vec![LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(); 2],
            vec![
                Coupling {
                    row: 0,
                    col: 1,
                    matrix: dmatrix![0.4],
                },
                Coupling {
                    row: 1,
                    col: 0,
                    matrix: dmatrix![0.4],
                },
            ],
            0.1,
            1e-3,
        )
        .unwrap();
        let alloc = AllocationVector::uniform(2, 1.0);
        let rec = grad_eta(&alloc, &net).unwrap();
        assert!((rec.grad[0] - rec.grad[1]).abs() < 1e-13);

        let hess = hessian_eta(&alloc, &net, 1e-5).unwrap();
        assert!((hess.hessian[(0, 0)] - hess.hessian[(1, 1)]).abs() < 1e-6);
        assert!(hess.positive_definite);
    }

    #[test]
    fn decoupled_hessian_is_diagonal() {
        let net = decoupled_pair();
        let alloc = AllocationVector::new(vec![0.4, 1.2]).unwrap();
        let hess = hessian_eta(&alloc, &net, 1e-5).unwrap();
        let diag_scale = hess.hessian[(0, 0)].abs().max(hess.hessian[(1, 1)].abs());
        assert!(hess.hessian[(0, 1)].abs() <= 1e-6 * diag_scale);
        let h = 1e-4;
        let second = |a: f64, g2: f64, r: f64| {
            (scalar_sigma_d1(a, g2, r + h) - scalar_sigma_d1(a, g2, r - h)) / (2.0 * h)
        };
        assert!((hess.hessian[(0, 0)] - second(-1.0, 4.0, 0.401)).abs() < 1e-6);
        assert!((hess.hessian[(1, 1)] - second(-0.5, 1.0, 1.201)).abs() < 1e-6);
        assert_eq!(hess.inverse_diagonally_dominant, Some(true));
        assert_eq!(hess.principal_inverse_dominance(&[1]), Some(true));
        assert!(hess.warnings.is_empty());
    }

    #[test]
    fn hessian_near_domain_edge_warns() {
        let net = decoupled_pair();
        let alloc = AllocationVector::new(vec![-1e-3 + 1e-7, 0.5]).unwrap();
        let hess = hessian_eta(&alloc, &net, 1e-5).unwrap();
        assert!(hess
            .warnings
            .iter()
            .any(|w| w.contains("forward difference")));
        assert!(matches!(
            hessian_eta(&alloc, &net, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }
}
