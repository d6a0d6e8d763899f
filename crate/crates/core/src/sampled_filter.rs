//! Periodic sampled-measurement Kalman covariance recursion.
//!
//! A period of length `tau = r_tot * tau0` is split into `r_tot` slots; in each
//! slot the covariance is propagated over `tau0` and then updated with the
//! sample of whichever sensor owns the slot. Composing the slot maps over one
//! period and iterating gives the periodic steady state.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CareProblem};
use crate::network::CoupledNetwork;

pub const DEFAULT_STEADY_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_PERIODS: usize = 100_000;
const PSD_TOL: f64 = 1e-10;

/// Slot assignment `R` over one period. Sensor indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    slots: Vec<usize>,
    sensors: usize,
    tau0: f64,
}

impl Schedule {
    pub fn new(slots: Vec<usize>, sensors: usize, min_count: usize, tau0: f64) -> Result<Self> {
        if !(tau0 > 0.0) || !tau0.is_finite() {
            return Err(Error::InvalidInput(format!(
                "slot duration must be positive, got {tau0}"
            )));
        }
        if sensors == 0 || slots.is_empty() {
            return Err(Error::InvalidInput(
                "schedule needs sensors and slots".into(),
            ));
        }
        if let Some(&bad) = slots.iter().find(|&&s| s >= sensors) {
            return Err(Error::InvalidInput(format!(
                "slot assigned to sensor {bad}, only {sensors} sensors exist"
            )));
        }
        let schedule = Self {
            slots,
            sensors,
            tau0,
        };
        if let Some((i, &c)) = schedule
            .counts()
            .iter()
            .enumerate()
            .find(|(_, &c)| c < min_count)
        {
            return Err(Error::InvalidInput(format!(
                "sensor {i} has {c} slots, fewer than the floor {min_count}"
            )));
        }
        Ok(schedule)
    }

    /// Canonical order for given slot counts: smooth weighted round-robin,
    /// ties to the lower index.
    pub fn round_robin(counts: &[usize], tau0: f64) -> Result<Self> {
        let total: usize = counts.iter().sum();
        let mut credit = vec![0i64; counts.len()];
        let mut slots = Vec::with_capacity(total);
        for _ in 0..total {
            for (c, &r) in credit.iter_mut().zip(counts) {
                *c += r as i64;
            }
            let mut best = 0;
            for i in 1..counts.len() {
                if credit[i] > credit[best] {
                    best = i;
                }
            }
            credit[best] -= total as i64;
            slots.push(best);
        }
        Self::new(slots, counts.len(), 1, tau0)
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.sensors];
        for &s in &self.slots {
            counts[s] += 1;
        }
        counts
    }

    pub fn r_tot(&self) -> usize {
        self.slots.len()
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    /// Period length `r_tot * tau0`.
    pub fn tau(&self) -> f64 {
        self.r_tot() as f64 * self.tau0
    }
}

/// Per-slot discretization: `exp(A tau0)`, the integrated process noise over one
/// slot, and each sensor's (state-padded) observation matrix.
#[derive(Debug, Clone)]
pub struct SampledSystem {
    transition: DMatrix<f64>,
    noise: DMatrix<f64>,
    cbar: Vec<DMatrix<f64>>,
    tau0: f64,
}

impl SampledSystem {
    pub fn new(
        a: &DMatrix<f64>,
        g: &DMatrix<f64>,
        cbar: Vec<DMatrix<f64>>,
        tau0: f64,
    ) -> Result<Self> {
        let noise = linalg::integrate_process_noise(a, g, tau0)?;
        let n = a.nrows();
        if let Some((i, c)) = cbar.iter().enumerate().find(|(_, c)| c.nrows() != n) {
            return Err(Error::InvalidInput(format!(
                "observation {i} has {} rows, state has {n}",
                c.nrows()
            )));
        }
        Ok(Self {
            transition: linalg::mat_exp(a, tau0)?,
            noise,
            cbar,
            tau0,
        })
    }

    /// Network discretized for `schedule`, with `cbar_i = c_i sqrt(tau)`.
    pub fn from_network(network: &CoupledNetwork, schedule: &Schedule) -> Result<Self> {
        if schedule.sensors() != network.len() {
            return Err(Error::InvalidInput(format!(
                "schedule covers {} sensors, network has {}",
                schedule.sensors(),
                network.len()
            )));
        }
        let (a, g) = network.assemble();
        let scale = schedule.tau().sqrt();
        let cbar = (0..network.len())
            .map(|i| network.padded_observation(i) * scale)
            .collect();
        Self::new(a, g, cbar, schedule.tau0())
    }

    pub fn sensors(&self) -> usize {
        self.cbar.len()
    }

    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn slot_noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn observation(&self, i: usize) -> &DMatrix<f64> {
        &self.cbar[i]
    }

    fn predict(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        &self.transition * sigma * self.transition.transpose() + &self.noise
    }

    // Joseph-form measurement update; equal to ((P^-)^{-1} + c c^T)^{-1} but
    // valid for singular priors.
    fn slot_map(&self, sigma: &DMatrix<f64>, i: usize) -> Result<DMatrix<f64>> {
        let prior = self.predict(sigma);
        let c = &self.cbar[i];
        if c.iter().all(|&x| x == 0.0) {
            return Ok(linalg::symmetrize(&prior));
        }
        let p = c.ncols();
        let innovation = c.transpose() * &prior * c + DMatrix::<f64>::identity(p, p);
        let gain_t = innovation
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("innovation covariance is not definite".into()))?
            .solve(&(c.transpose() * &prior));
        let gain = gain_t.transpose();
        let n = prior.nrows();
        let keep = DMatrix::<f64>::identity(n, n) - &gain * c.transpose();
        let post = &keep * &prior * keep.transpose() + &gain * gain.transpose();
        Ok(linalg::symmetrize(&post))
    }
}

fn check_covariance(sigma: &DMatrix<f64>, dim: usize) -> Result<()> {
    if sigma.nrows() != dim || sigma.ncols() != dim {
        return Err(Error::InvalidInput(format!(
            "covariance must be {dim}x{dim}, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if !linalg::all_finite(sigma) {
        return Err(Error::InvalidInput(
            "covariance has non-finite entries".into(),
        ));
    }
    if !linalg::is_symmetric(sigma, 1e-12) {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    let lo = linalg::min_sym_eigenvalue(sigma);
    if lo < -PSD_TOL * sigma.norm().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "covariance is not positive semidefinite (min eigenvalue {lo:.3e})"
        )));
    }
    Ok(())
}

/// One slot: propagate over `tau0`, then update with sensor `sensor`.
pub fn predict_update(
    sigma: &DMatrix<f64>,
    sensor: usize,
    system: &SampledSystem,
) -> Result<DMatrix<f64>> {
    check_covariance(sigma, system.state_dim())?;
    if sensor >= system.sensors() {
        return Err(Error::InvalidInput(format!(
            "sensor {sensor} out of range 0..{}",
            system.sensors()
        )));
    }
    system.slot_map(sigma, sensor)
}

fn period_map(
    sigma: &DMatrix<f64>,
    schedule: &Schedule,
    system: &SampledSystem,
) -> Result<DMatrix<f64>> {
    let mut current = sigma.clone();
    for &slot in schedule.slots() {
        current = system.slot_map(&current, slot)?;
    }
    Ok(current)
}

fn check_pairing(schedule: &Schedule, system: &SampledSystem) -> Result<()> {
    if schedule.sensors() != system.sensors() {
        return Err(Error::InvalidInput(format!(
            "schedule covers {} sensors, system has {}",
            schedule.sensors(),
            system.sensors()
        )));
    }
    if (schedule.tau0() - system.tau0()).abs() > 1e-15 * system.tau0() {
        return Err(Error::InvalidInput(format!(
            "schedule slot {} differs from the discretization slot {}",
            schedule.tau0(),
            system.tau0()
        )));
    }
    Ok(())
}

/// `Phi_R(Sigma0)`: the slot maps composed in schedule order.
pub fn apply_schedule(
    sigma0: &DMatrix<f64>,
    schedule: &Schedule,
    system: &SampledSystem,
) -> Result<DMatrix<f64>> {
    check_pairing(schedule, system)?;
    check_covariance(sigma0, system.state_dim())?;
    period_map(sigma0, schedule, system)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleSteadyState {
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    /// Trace of the periodic steady-state covariance.
    pub error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

/// Iterates the period map to its fixed point.
pub fn steady_state_schedule(
    schedule: &Schedule,
    system: &SampledSystem,
    sigma0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ScheduleSteadyState> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    check_pairing(schedule, system)?;
    check_covariance(sigma0, system.state_dim())?;
    let mut current = sigma0.clone();
    let mut residual = f64::INFINITY;
    // An unobservable unstable mode grows geometrically; stop long before overflow.
    let divergence_bound = 1e100 * linalg::frobenius(sigma0).max(1.0);
    for k in 1..=max_iter {
        let next = period_map(&current, schedule, system)?;
        if !linalg::all_finite(&next) {
            return Err(Error::Convergence {
                what: "periodic covariance iteration",
                iterations: k,
                residual: f64::INFINITY,
            });
        }
        residual = linalg::frobenius(&(&next - &current));
        current = next;
        let scale = linalg::frobenius(&current);
        if !(scale <= divergence_bound) {
            return Err(Error::Convergence {
                what: "periodic covariance iteration",
                iterations: k,
                residual,
            });
        }
        if residual <= tol * scale.max(1.0) {
            return Ok(ScheduleSteadyState {
                error: current.trace(),
                covariance: current,
                iterations: k,
                converged: true,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        what: "periodic covariance iteration",
        iterations: max_iter,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauAdmissibility {
    /// `exp(l_i tau) != exp(l_j tau)` for every pair of distinct eigenvalues.
    pub admissible: bool,
    /// `|Im l_i - Im l_j| tau < 2 pi` for every pair, which implies admissibility.
    pub small_tau_condition: bool,
    pub min_separation: f64,
}

pub fn check_tau_admissible(a: &DMatrix<f64>, tau: f64) -> TauAdmissibility {
    if !(tau > 0.0) || !tau.is_finite() || !a.is_square() || !linalg::all_finite(a) {
        return TauAdmissibility {
            admissible: false,
            small_tau_condition: false,
            min_separation: 0.0,
        };
    }
    let eig: Vec<_> = a.complex_eigenvalues().iter().copied().collect();
    let mut admissible = true;
    let mut small = true;
    let mut min_separation = f64::INFINITY;
    for i in 0..eig.len() {
        for j in (i + 1)..eig.len() {
            let (li, lj) = (eig[i], eig[j]);
            if (li.im - lj.im).abs() * tau >= 2.0 * std::f64::consts::PI {
                small = false;
            }
            let scale = 1f64.max(li.norm()).max(lj.norm());
            if (li - lj).norm() <= 1e-8 * scale {
                continue;
            }
            let sep = ((li * tau).exp() - (lj * tau).exp()).norm();
            min_separation = min_separation.min(sep);
            if sep <= 1e-10 {
                admissible = false;
            }
        }
    }
    TauAdmissibility {
        admissible,
        small_tau_condition: small,
        min_separation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRow {
    pub tau: f64,
    pub tau0: f64,
    pub eta_bar: f64,
    pub eta_continuous: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Continuous-observation steady state for slot counts `counts` (rates `r_i = counts_i`).
pub fn continuous_steady_state(counts: &[usize], network: &CoupledNetwork) -> Result<DMatrix<f64>> {
    if counts.len() != network.len() {
        return Err(Error::InvalidInput(format!(
            "{} counts for {} sensors",
            counts.len(),
            network.len()
        )));
    }
    let dim = network.state_dim();
    let mut s = DMatrix::zeros(dim, dim);
    for (i, &r) in counts.iter().enumerate() {
        let c = network.padded_observation(i);
        s += &c * c.transpose() * r as f64;
    }
    let problem = CareProblem::new(network.drift().clone(), s, network.process_noise())?;
    linalg::solve_care(&problem)
}

/// `|eta_bar(tau, R) - tr Sigma(inf)|` for each period in `tau_list`, with the
/// canonical round-robin order for `counts`.
pub fn asymptotic_gap(
    counts: &[usize],
    network: &CoupledNetwork,
    tau_list: &[f64],
) -> Result<Vec<GapRow>> {
    let r_tot: usize = counts.iter().sum();
    if r_tot == 0 {
        return Err(Error::InvalidInput("slot counts sum to zero".into()));
    }
    for &tau in tau_list {
        if !check_tau_admissible(network.drift(), tau).admissible {
            return Err(Error::InvalidInput(format!(
                "period {tau} is not admissible for this drift"
            )));
        }
    }
    let continuous = continuous_steady_state(counts, network)?;
    let eta_continuous = continuous.trace();
    tau_list
        .iter()
        .map(|&tau| {
            let schedule = Schedule::round_robin(counts, tau / r_tot as f64)?;
            let system = SampledSystem::from_network(network, &schedule)?;
            let steady =
                steady_state_schedule(&schedule, &system, &continuous, 1e-13, DEFAULT_MAX_PERIODS)?;
            Ok(GapRow {
                tau,
                tau0: schedule.tau0(),
                eta_bar: steady.error,
                eta_continuous,
                gap: (steady.error - eta_continuous).abs(),
                iterations: steady.iterations,
            })
        })
        .collect()
}
