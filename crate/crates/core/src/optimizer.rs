//! Minimization of `eta` over the simplex `Sp[sigma]`.
//!
//! The primary solver is a spectral (Barzilai-Borwein) projected gradient with
//! Armijo backtracking. [`double_bracket_flow`] is an independent route that
//! follows the gradient flow on rank-one unit-trace matrices `H = v v^T`, with
//! `gamma = sigma * diag(H)`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{AllocationVector, CoupledNetwork};
use crate::sensitivity::{grad_eta, GradientRecord};

/// `gamma_i` counts as zero below this fraction of `sigma`.
pub const ACTIVE_THRESHOLD: f64 = 1e-9;
/// Default KKT tolerance relative to `|eta|`.
pub const DEFAULT_KKT_REL: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct KktCertificate {
    pub gamma_star: AllocationVector,
    pub sigma: f64,
    pub eta: f64,
    pub grad: Vec<f64>,
    pub mu: f64,
    /// `true` where `gamma_i` is classified as positive.
    pub active: Vec<bool>,
    pub max_violation: f64,
    pub kkt_tol: f64,
    pub satisfied: bool,
    pub mu_nonpositive: bool,
    pub iterations: usize,
}

impl KktCertificate {
    pub fn gamma(&self) -> &[f64] {
        self.gamma_star.gamma()
    }
}

fn classify(gamma: &[f64], sigma: f64) -> Vec<bool> {
    let cut = ACTIVE_THRESHOLD * sigma;
    gamma.iter().map(|&g| g > cut && g > 0.0).collect()
}

/// Multiplier and worst KKT clause violation for a gradient at `gamma`.
fn kkt_measure(gamma: &[f64], grad: &[f64], sigma: f64) -> (f64, f64, Vec<bool>) {
    let active = classify(gamma, sigma);
    let support: Vec<f64> = grad
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(g, _)| *g)
        .collect();
    let mu = if support.is_empty() {
        grad.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        support.iter().sum::<f64>() / support.len() as f64
    };
    let violation = grad
        .iter()
        .zip(&active)
        .map(|(&g, &a)| if a { (g - mu).abs() } else { (mu - g).max(0.0) })
        .fold(0.0, f64::max);
    (mu, violation, active)
}

fn certificate_from(
    record: &GradientRecord,
    sigma: f64,
    kkt_tol: f64,
    iterations: usize,
) -> KktCertificate {
    let (mu, max_violation, active) = kkt_measure(record.gamma.gamma(), &record.grad, sigma);
    KktCertificate {
        gamma_star: record.gamma.clone(),
        sigma,
        eta: record.eta,
        grad: record.grad.clone(),
        mu,
        active,
        max_violation,
        kkt_tol,
        satisfied: max_violation <= kkt_tol,
        mu_nonpositive: mu <= kkt_tol,
        iterations,
    }
}

/// KKT diagnostic at `alloc` with absolute tolerance `kkt_tol`.
pub fn kkt_check(
    alloc: &AllocationVector,
    network: &CoupledNetwork,
    kkt_tol: f64,
) -> Result<KktCertificate> {
    let record = grad_eta(alloc, network)?;
    Ok(certificate_from(&record, alloc.sigma(), kkt_tol, 0))
}

/// Euclidean projection onto `{x >= 0, sum x = sigma}`, with the sum restored exactly.
pub fn project_to_simplex(point: &[f64], sigma: f64) -> Vec<f64> {
    let n = point.len();
    if n == 0 {
        return Vec::new();
    }
    if sigma <= 0.0 {
        return vec![0.0; n];
    }
    let mut sorted = point.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - sigma) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out: Vec<f64> = point.iter().map(|&x| (x - theta).max(0.0)).collect();
    let drift = sigma - out.iter().sum::<f64>();
    let top = (0..n)
        .max_by(|&a, &b| out[a].total_cmp(&out[b]))
        .unwrap_or(0);
    out[top] = (out[top] + drift).max(0.0);
    out
}

/// `d . g` with `g` centred; `d` sums to zero on the simplex, and centring
/// keeps projection roundoff in `sum d` from swamping tiny slopes.
fn directional(d: &[f64], g: &[f64]) -> f64 {
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    d.iter().zip(g).map(|(d, g)| d * (g - mean)).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Stop once the KKT violation is below `tol * |eta|`.
    pub tol: f64,
    /// Certification tolerance relative to `|eta|`.
    pub kkt_rel: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            kkt_rel: DEFAULT_KKT_REL,
            max_iter: 10_000,
        }
    }
}

fn check_sigma(network: &CoupledNetwork, sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!(
            "total capacity must be finite and nonnegative, got {sigma}"
        )));
    }
    if !network.observability().full_rank {
        return Err(Error::Domain(
            "(A, c) is not observable at this coupling strength".into(),
        ));
    }
    Ok(())
}

/// Unique minimizer of `eta` on `Sp[sigma]` with its KKT certificate.
pub fn minimize_on_simplex(
    network: &CoupledNetwork,
    sigma: f64,
    start: Option<&AllocationVector>,
    opts: &SolverOptions,
) -> Result<KktCertificate> {
    check_sigma(network, sigma)?;
    let n = network.len();
    let initial = match start {
        Some(s) if s.len() == n => project_to_simplex(s.gamma(), sigma),
        Some(s) => {
            return Err(Error::InvalidInput(format!(
                "start has {} entries, network has {n} sensors",
                s.len()
            )))
        }
        None => vec![sigma / n as f64; n],
    };
    let mut record = grad_eta(&AllocationVector::new(initial)?, network)?;
    if sigma == 0.0 || n == 1 {
        let kkt_tol = opts.kkt_rel * record.eta.abs();
        return Ok(certificate_from(&record, sigma, kkt_tol, 0));
    }

    let gmax = record.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let step_max = 1e6 * sigma / gmax.max(f64::MIN_POSITIVE);
    let step_min = 1e-12 * sigma / gmax.max(f64::MIN_POSITIVE);
    let mut step = (sigma / gmax.max(f64::MIN_POSITIVE)).clamp(step_min, step_max);
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let (_, violation, _) = kkt_measure(record.gamma.gamma(), &record.grad, sigma);
        if violation <= opts.tol * record.eta.abs() {
            break;
        }
        iterations += 1;
        let gamma = record.gamma.gamma();
        let target: Vec<f64> = gamma
            .iter()
            .zip(&record.grad)
            .map(|(x, g)| x - step * g)
            .collect();
        let projected = project_to_simplex(&target, sigma);
        let direction: Vec<f64> = projected.iter().zip(gamma).map(|(p, x)| p - x).collect();
        let slope = directional(&direction, &record.grad);
        if direction.iter().all(|&d| d == 0.0) || slope >= 0.0 {
            break;
        }

        let slack = 4.0 * f64::EPSILON * record.eta.abs();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = gamma
                .iter()
                .zip(&direction)
                .map(|(x, d)| x + t * d)
                .collect();
            let trial = project_to_simplex(&trial, sigma);
            let candidate = grad_eta(&AllocationVector::new(trial)?, network)?;
            // Near the optimum eta changes below roundoff; a trial that has not
            // overshot along the direction is then accepted on the gradient.
            let flat = (candidate.eta - record.eta).abs() <= 1e3 * slack;
            let trial_slope = directional(&direction, &candidate.grad);
            if candidate.eta <= record.eta + 1e-4 * t * slope + slack
                || (flat && trial_slope <= 0.0)
            {
                accepted = Some(candidate);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else { break };

        let s: Vec<f64> = next
            .gamma
            .gamma()
            .iter()
            .zip(gamma)
            .map(|(a, b)| a - b)
            .collect();
        let y: Vec<f64> = next
            .grad
            .iter()
            .zip(&record.grad)
            .map(|(a, b)| a - b)
            .collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { step_max };
        step = step.clamp(step_min, step_max);
        record = next;
    }

    let kkt_tol = opts.kkt_rel * record.eta.abs();
    let cert = certificate_from(&record, sigma, kkt_tol, iterations);
    if !cert.satisfied {
        return Err(Error::NonConvergence {
            best: record.gamma.into_inner(),
            violation: cert.max_violation,
        });
    }
    Ok(cert)
}

/// Point `H = v v^T` with `|v| = 1`, paired with the simplex height used by `pi`.
#[derive(Debug, Clone)]
pub struct BracketState {
    h: DMatrix<f64>,
    sigma: f64,
}

impl BracketState {
    pub fn new(h: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if !h.is_square() || h.nrows() == 0 || !linalg::all_finite(&h) {
            return Err(Error::InvalidInput(
                "H must be a finite square matrix".into(),
            ));
        }
        if !linalg::is_symmetric(&h, 1e-12) {
            return Err(Error::InvalidInput("H must be symmetric".into()));
        }
        if (h.trace() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "H must have unit trace, got {}",
                h.trace()
            )));
        }
        let mut eig: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
        if eig.len() > 1 && eig[1].abs() > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "H must be rank one (second eigenvalue {:.3e})",
                eig[1]
            )));
        }
        Ok(Self { h, sigma })
    }

    /// `H = v v^T / |v|^2`.
    pub fn from_vector(v: &[f64], sigma: f64) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidInput(
                "direction must be finite and nonzero".into(),
            ));
        }
        let v = DMatrix::from_iterator(v.len(), 1, v.iter().map(|x| x / norm));
        Ok(Self {
            h: &v * v.transpose(),
            sigma,
        })
    }

    /// Nonnegative section of `pi`: `v_i = sqrt(gamma_i / sigma)`.
    pub fn lift(alloc: &AllocationVector, sigma: f64) -> Result<Self> {
        if !alloc.is_on_simplex(sigma, 1e-12) || !(sigma > 0.0) {
            return Err(Error::InvalidInput(
                "lift needs a point of Sp[sigma] with sigma > 0".into(),
            ));
        }
        let v: Vec<f64> = alloc
            .gamma()
            .iter()
            .map(|g| (g / sigma).max(0.0).sqrt())
            .collect();
        Self::from_vector(&v, sigma)
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `pi(H) = sigma * diag(H)`, clipped at zero against roundoff.
    pub fn gamma(&self) -> AllocationVector {
        let g = self
            .h
            .diagonal()
            .iter()
            .map(|d| (self.sigma * d).max(0.0))
            .collect();
        AllocationVector::new(g).expect("finite by construction")
    }

    pub fn trace_drift(&self) -> f64 {
        (self.h.trace() - 1.0).abs()
    }
}

/// Closest point of the rank-one unit-trace set, via the leading eigenvector.
fn reproject(h: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = linalg::symmetrize(h).symmetric_eigen();
    let top = (0..eig.eigenvalues.len())
        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .unwrap_or(0);
    let v = eig.eigenvectors.column(top).into_owned();
    let v = &v / v.norm();
    &v * v.transpose()
}

fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    /// Initial Euler step; `None` picks `0.1 / (sigma * max|grad|)`.
    pub step: Option<f64>,
    /// Stop when `||[H, Phi'(H)]||_F <= tol * max(1, ||Phi'(H)||_F)`.
    pub tol: f64,
    pub max_steps: usize,
    /// Largest off-manifold excursion of an Euler step before the step is halved.
    pub max_drift: f64,
    pub allow_boundary_start: bool,
    pub kkt_rel: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            step: None,
            tol: 1e-10,
            max_steps: 200_000,
            max_drift: 1e-6,
            allow_boundary_start: false,
            kkt_rel: DEFAULT_KKT_REL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub state: BracketState,
    pub certificate: KktCertificate,
    /// `Phi(H) = eta(pi(H))` at every accepted step, starting with `H0`.
    pub phi_history: Vec<f64>,
    /// Largest `|tr H - 1|` after re-projection over the run.
    pub max_trace_drift: f64,
    pub bracket_norm: f64,
    pub steps: usize,
}

/// Explicit Euler integration of `dH/dt = -[H, [H, sigma diag(eta'(pi(H)))]]`
/// with rank-one re-projection after every step.
pub fn double_bracket_flow(
    network: &CoupledNetwork,
    sigma: f64,
    h0: BracketState,
    opts: &FlowOptions,
) -> Result<FlowOutcome> {
    check_sigma(network, sigma)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput("flow needs sigma > 0".into()));
    }
    let n = network.len();
    if h0.h.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "H0 is {}x{}, network has {n} sensors",
            h0.h.nrows(),
            h0.h.ncols()
        )));
    }
    if !opts.allow_boundary_start && h0.h.diagonal().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidInput(
            "H0 must have a strictly positive diagonal; vertex and face starts are flow equilibria"
                .into(),
        ));
    }
    let mut state = BracketState { h: h0.h, sigma };
    let mut record = grad_eta(&state.gamma(), network)?;
    let mut phi_history = vec![record.eta];
    let mut max_trace_drift = state.trace_drift();
    let potential = |g: &[f64]| {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            g.iter().map(|x| sigma * x),
        ))
    };

    let gmax = record.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut dt = opts
        .step
        .unwrap_or(0.1 / (sigma * gmax).max(f64::MIN_POSITIVE));
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!(
            "step must be positive, got {dt}"
        )));
    }
    let dt_floor = dt * 1e-14;
    let mut steps = 0;
    let mut bracket_norm;
    let mut previous_bracket = f64::INFINITY;

    loop {
        let phi_prime = potential(&record.grad);
        let bracket = commutator(&state.h, &phi_prime);
        bracket_norm = bracket.norm();
        // A growing bracket means the Euler step has passed its stability limit.
        if bracket_norm > previous_bracket {
            dt *= 0.5;
        } else if steps > 0 {
            dt *= 1.25;
        }
        previous_bracket = bracket_norm;
        if bracket_norm <= opts.tol * phi_prime.norm().max(1.0) || steps >= opts.max_steps {
            break;
        }
        let velocity = -commutator(&state.h, &bracket);

        let mut last_drift = 0.0;
        let accepted = loop {
            if dt < dt_floor {
                return Err(Error::StepSize {
                    step: dt,
                    drift: last_drift,
                });
            }
            let trial = &state.h + &velocity * dt;
            let projected = reproject(&trial);
            let drift = (&trial - &projected).norm();
            last_drift = drift;
            if drift > opts.max_drift {
                dt *= 0.5;
                continue;
            }
            let candidate = BracketState {
                h: projected,
                sigma,
            };
            let next = grad_eta(&candidate.gamma(), network)?;
            if next.eta > record.eta + 1e-12 * record.eta.abs() {
                dt *= 0.5;
                continue;
            }
            break (candidate, next);
        };
        steps += 1;
        state = accepted.0;
        record = accepted.1;
        max_trace_drift = max_trace_drift.max(state.trace_drift());
        phi_history.push(record.eta);
    }

    let kkt_tol = opts.kkt_rel * record.eta.abs();
    let certificate = certificate_from(&record, sigma, kkt_tol, steps);
    Ok(FlowOutcome {
        state,
        certificate,
        phi_history,
        max_trace_drift,
        bracket_norm,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LinearSubsystem;

    fn pair(a: [f64; 2], g: [f64; 2]) -> CoupledNetwork {
        CoupledNetwork::new(
            vec![
                LinearSubsystem::scalar(a[0], g[0], 1.0).unwrap(),
                LinearSubsystem::scalar(a[1], g[1], 1.0).unwrap(),
            ],
            vec![],
            0.0,
            1e-3,
        )
        .unwrap()
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_to_simplex(&[0.5, -0.2, 2.0], 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert_eq!(project_to_simplex(&[0.2, 0.8], 1.0), vec![0.2, 0.8]);
        assert_eq!(project_to_simplex(&[3.0, 1.0], 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn identical_pair_splits_evenly() {
        let net = pair([-1.0, -1.0], [1.0, 1.0]);
        let cert = minimize_on_simplex(
            &net,
            2.0,
            Some(&AllocationVector::new(vec![1.7, 0.3]).unwrap()),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((cert.gamma()[0] - 1.0).abs() < 1e-8);
        assert!((cert.gamma()[1] - 1.0).abs() < 1e-8);
        assert!(cert.satisfied && cert.mu < 0.0);
    }

    #[test]
    fn zero_capacity_is_origin() {
        let net = pair([-1.0, -0.5], [2.0, 1.0]);
        let cert = minimize_on_simplex(&net, 0.0, None, &SolverOptions::default()).unwrap();
        assert_eq!(cert.gamma(), &[0.0, 0.0]);
        assert!(cert.active.iter().all(|a| !a));
        assert_eq!(
            cert.mu,
            cert.grad.iter().copied().fold(f64::INFINITY, f64::min)
        );
        assert!(cert.satisfied);
    }

    #[test]
    fn single_sensor_takes_everything() {
        let net = CoupledNetwork::new(
            vec![LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap()],
            vec![],
            0.0,
            1e-3,
        )
        .unwrap();
        let cert = minimize_on_simplex(&net, 1.5, None, &SolverOptions::default()).unwrap();
        assert_eq!(cert.gamma(), &[1.5]);
        assert!(cert.mu < 0.0);
        assert_eq!(cert.mu, cert.grad[0]);
    }

    #[test]
    fn moving_mass_breaks_kkt() {
        let net = pair([-1.0, -0.5], [2.0, 1.0]);
        let cert = minimize_on_simplex(&net, 1.0, None, &SolverOptions::default()).unwrap();
        assert!(cert.active.iter().all(|&a| a));
        let mut moved = cert.gamma().to_vec();
        moved[0] += 0.01;
        moved[1] -= 0.01;
        let off = kkt_check(&AllocationVector::new(moved).unwrap(), &net, cert.kkt_tol).unwrap();
        assert!(off.max_violation > cert.kkt_tol);
        assert!(!off.satisfied);
    }

    #[test]
    fn restarts_agree() {
        let net = pair([-1.0, -0.5], [2.0, 1.0]);
        let opts = SolverOptions::default();
        let a = minimize_on_simplex(
            &net,
            1.0,
            Some(&AllocationVector::new(vec![1.0, 0.0]).unwrap()),
            &opts,
        )
        .unwrap();
        let b = minimize_on_simplex(
            &net,
            1.0,
            Some(&AllocationVector::new(vec![0.0, 1.0]).unwrap()),
            &opts,
        )
        .unwrap();
        assert!((a.gamma()[0] - b.gamma()[0]).abs() < 1e-9);
    }

    #[test]
    fn vertex_start_is_an_equilibrium() {
        let net = pair([-1.0, -0.5], [2.0, 1.0]);
        let h0 = BracketState::from_vector(&[1.0, 0.0], 1.0).unwrap();
        let opts = FlowOptions {
            allow_boundary_start: true,
            ..FlowOptions::default()
        };
        let out = double_bracket_flow(&net, 1.0, h0.clone(), &opts).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.bracket_norm, 0.0);
        assert!(matches!(
            double_bracket_flow(&net, 1.0, h0, &FlowOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn flow_converges_to_symmetric_split() {
        let net = pair([-1.0, -1.0], [1.0, 1.0]);
        let h0 = BracketState::from_vector(&[0.6f64.sqrt(), 0.4f64.sqrt()], 2.0).unwrap();
        let out = double_bracket_flow(&net, 2.0, h0, &FlowOptions::default()).unwrap();
        let g = out.state.gamma();
        assert!((g.gamma()[0] - 1.0).abs() < 1e-6, "{:?}", g.gamma());
        assert!((g.gamma()[1] - 1.0).abs() < 1e-6);
        assert!(out
            .phi_history
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
        assert!(out.max_trace_drift <= 1e-10);
    }

    #[test]
    fn lift_round_trips() {
        let alloc = AllocationVector::new(vec![0.25, 0.75]).unwrap();
        let state = BracketState::lift(&alloc, 1.0).unwrap();
        let back = state.gamma();
        assert!((back.gamma()[0] - 0.25).abs() < 1e-15);
        assert!(BracketState::new(state.h().clone(), 1.0).is_ok());
        assert!(BracketState::new(DMatrix::identity(2, 2) * 0.5, 1.0).is_err());
    }
}
