//! The optimal allocation map `f(sigma)` over `[0, sigma_max]`, its active
//! sets and the capacities at which new sensors switch on.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{AllocationVector, CoupledNetwork};
use crate::optimizer::{minimize_on_simplex, KktCertificate, SolverOptions};

pub const DEFAULT_GRID_SIZE: usize = 200;
/// `i` belongs to `I_sigma` when `f_i(sigma) > MEMBERSHIP * max(sigma, 1)`.
pub const MEMBERSHIP: f64 = 1e-9;
/// Width of the `J_sigma` band in units of the KKT tolerance.
pub const EQUAL_GRADIENT_BAND: f64 = 10.0;

#[derive(Debug, Clone, Serialize)]
pub struct GridFailure {
    pub sigma: f64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationPath {
    pub sigma_max: f64,
    pub sigma_grid: Vec<f64>,
    pub f_values: Vec<Vec<f64>>,
    pub mu_values: Vec<f64>,
    pub eta_values: Vec<f64>,
    pub kkt_tols: Vec<f64>,
    pub active_sets: Vec<Vec<usize>>,
    pub equal_gradient_sets: Vec<Vec<usize>>,
    pub breakpoints: Vec<f64>,
    /// Grid points whose solve failed; they are left out of the path.
    pub failures: Vec<GridFailure>,
}

impl AllocationPath {
    pub fn len(&self) -> usize {
        self.sigma_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_grid.is_empty()
    }

    pub fn sensors(&self) -> usize {
        self.f_values.first().map_or(0, Vec::len)
    }
}

pub fn active_set(gamma: &[f64], sigma: f64) -> Vec<usize> {
    let cut = MEMBERSHIP * sigma.max(1.0);
    (0..gamma.len()).filter(|&i| gamma[i] > cut).collect()
}

fn equal_gradient_set(cert: &KktCertificate) -> Vec<usize> {
    let band = EQUAL_GRADIENT_BAND * cert.kkt_tol;
    (0..cert.grad.len())
        .filter(|&i| (cert.grad[i] - cert.mu).abs() <= band)
        .collect()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|i| b.contains(i))
}

fn validate_range(sigma_max: f64, grid_size: usize) -> Result<()> {
    if !(sigma_max > 0.0) || !sigma_max.is_finite() {
        return Err(Error::InvalidInput(format!(
            "sigma_max must be finite and positive, got {sigma_max}"
        )));
    }
    if grid_size < 2 {
        return Err(Error::InvalidInput(format!(
            "grid needs at least 2 points, got {grid_size}"
        )));
    }
    Ok(())
}

/// Solves on an even grid over `[0, sigma_max]`, warm-starting each point
/// from the previous solution rescaled to the new capacity.
pub fn sweep(
    network: &CoupledNetwork,
    sigma_max: f64,
    grid_size: usize,
    opts: &SolverOptions,
) -> Result<AllocationPath> {
    validate_range(sigma_max, grid_size)?;
    if !network.observability().full_rank {
        return Err(Error::Domain(
            "(A, c) is not observable at this coupling strength".into(),
        ));
    }
    let mut path = AllocationPath {
        sigma_max,
        sigma_grid: Vec::with_capacity(grid_size),
        f_values: Vec::with_capacity(grid_size),
        mu_values: Vec::with_capacity(grid_size),
        eta_values: Vec::with_capacity(grid_size),
        kkt_tols: Vec::with_capacity(grid_size),
        active_sets: Vec::with_capacity(grid_size),
        equal_gradient_sets: Vec::with_capacity(grid_size),
        breakpoints: Vec::new(),
        failures: Vec::new(),
    };
    let mut warm: Option<(Vec<f64>, f64)> = None;
    for k in 0..grid_size {
        let sigma = sigma_max * k as f64 / (grid_size - 1) as f64;
        let start = match &warm {
            Some((g, s)) if *s > 0.0 => Some(AllocationVector::new(
                g.iter().map(|x| x * sigma / s).collect(),
            )?),
            _ => None,
        };
        match minimize_on_simplex(network, sigma, start.as_ref(), opts) {
            Ok(cert) => {
                let gamma = cert.gamma().to_vec();
                path.sigma_grid.push(sigma);
                path.active_sets.push(active_set(&gamma, sigma));
                path.equal_gradient_sets.push(equal_gradient_set(&cert));
                path.mu_values.push(cert.mu);
                path.eta_values.push(cert.eta);
                path.kkt_tols.push(cert.kkt_tol);
                path.f_values.push(gamma.clone());
                warm = Some((gamma, sigma));
            }
            Err(e) => path.failures.push(GridFailure {
                sigma,
                message: e.to_string(),
            }),
        }
    }
    Ok(path)
}

fn solve_active(network: &CoupledNetwork, sigma: f64, opts: &SolverOptions) -> Result<Vec<usize>> {
    let cert = minimize_on_simplex(network, sigma, None, opts)?;
    Ok(active_set(cert.gamma(), sigma))
}

fn refine(
    network: &CoupledNetwork,
    opts: &SolverOptions,
    tol: f64,
    (lo, set_lo): (f64, Vec<usize>),
    (hi, set_hi): (f64, Vec<usize>),
) -> Result<Vec<f64>> {
    if hi - lo <= tol {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    let mid = 0.5 * (lo + hi);
    let set_mid = solve_active(network, mid, opts)?;
    if !is_subset(&set_lo, &set_mid) || !is_subset(&set_mid, &set_hi) {
        return Err(Error::StructureViolation(format!(
            "active set shrinks inside [{lo}, {hi}]: {set_lo:?} -> {set_mid:?} -> {set_hi:?}"
        )));
    }
    if set_mid == set_lo {
        refine(network, opts, tol, (mid, set_mid), (hi, set_hi))
    } else if set_mid == set_hi {
        refine(network, opts, tol, (lo, set_lo), (mid, set_mid))
    } else {
        let mut left = refine(network, opts, tol, (lo, set_lo), (mid, set_mid.clone()))?;
        left.extend(refine(network, opts, tol, (mid, set_mid), (hi, set_hi))?);
        Ok(left)
    }
}

/// Capacities where the active set grows, refined by bisection to `refine_tol`.
/// The result always starts at 0 and ends at `sigma_max`.
pub fn detect_breakpoints(
    path: &AllocationPath,
    network: &CoupledNetwork,
    refine_tol: f64,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if !(refine_tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "refine_tol must be positive, got {refine_tol}"
        )));
    }
    if path.sigma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("sigma grid must be increasing".into()));
    }
    let mut changes = Vec::new();
    for k in 0..path.len().saturating_sub(1) {
        let (a, b) = (&path.active_sets[k], &path.active_sets[k + 1]);
        if !is_subset(a, b) {
            return Err(Error::StructureViolation(format!(
                "active set shrinks between sigma = {} and {}: {a:?} -> {b:?}",
                path.sigma_grid[k],
                path.sigma_grid[k + 1]
            )));
        }
        if a != b {
            changes.push(k);
        }
    }
    let refined: Vec<Vec<f64>> = changes
        .par_iter()
        .map(|&k| {
            refine(
                network,
                opts,
                refine_tol,
                (path.sigma_grid[k], path.active_sets[k].clone()),
                (path.sigma_grid[k + 1], path.active_sets[k + 1].clone()),
            )
        })
        .collect::<Result<_>>()?;

    let mut points = vec![0.0];
    for p in refined.into_iter().flatten() {
        if p > refine_tol && p < path.sigma_max - refine_tol {
            points.push(p);
        }
    }
    points.push(path.sigma_max);
    points.sort_by(f64::total_cmp);
    points.dedup_by(|a, b| (*a - *b).abs() <= refine_tol);
    Ok(points)
}

/// Sweep followed by breakpoint detection, stored on the path.
pub fn sweep_with_breakpoints(
    network: &CoupledNetwork,
    sigma_max: f64,
    grid_size: usize,
    refine_tol: f64,
    opts: &SolverOptions,
) -> Result<AllocationPath> {
    let mut path = sweep(network, sigma_max, grid_size, opts)?;
    path.breakpoints = detect_breakpoints(&path, network, refine_tol, opts)?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub monotone: bool,
    /// Most negative increment of any `f_i` between adjacent grid points.
    pub worst_decrease: f64,
    pub continuous: bool,
    /// Largest secant slope relative to its neighbours inside a breakpoint-free stretch.
    pub worst_slope_ratio: f64,
    pub filtration: bool,
    /// Grid indices `k` with `I_k` not contained in `I_{k+1}`.
    pub filtration_breaks: Vec<usize>,
    pub worst_sum_error: f64,
    pub multiplier_nonpositive: bool,
    pub worst_mu: f64,
    pub active_within_equal_gradient: bool,
    /// Grid points with `J != I` whose neighbours share the same active set.
    pub equal_gradient_excess: Vec<usize>,
    pub passed: bool,
}

pub const MONOTONE_TOL: f64 = -1e-8;
pub const SLOPE_JUMP: f64 = 10.0;
pub const SUM_TOL: f64 = 1e-10;

fn slope_floor(path: &AllocationPath) -> f64 {
    1e-6 * path.sigma_max.max(1.0) / path.sigma_max.max(f64::MIN_POSITIVE)
}

/// Monotonicity, continuity, filtration and multiplier checks on a path.
pub fn verify_structure(path: &AllocationPath) -> StructureReport {
    let n = path.len();
    let sensors = path.sensors();

    let mut worst_decrease = 0.0f64;
    for k in 0..n.saturating_sub(1) {
        for i in 0..sensors {
            worst_decrease = worst_decrease.min(path.f_values[k + 1][i] - path.f_values[k][i]);
        }
    }

    let slopes: Vec<Vec<f64>> = (0..n.saturating_sub(1))
        .map(|k| {
            let h = path.sigma_grid[k + 1] - path.sigma_grid[k];
            (0..sensors)
                .map(|i| (path.f_values[k + 1][i] - path.f_values[k][i]) / h)
                .collect()
        })
        .collect();
    let floor = slope_floor(path);
    let mut worst_slope_ratio = 0.0f64;
    for k in 1..slopes.len().saturating_sub(1) {
        let steady = (k - 1..=k + 2).all(|j| path.active_sets[j] == path.active_sets[k]);
        if !steady {
            continue;
        }
        for (i, s) in slopes[k].iter().enumerate() {
            let around = slopes[k - 1][i].abs().max(slopes[k + 1][i].abs()) + floor;
            worst_slope_ratio = worst_slope_ratio.max(s.abs() / around);
        }
    }

    let filtration_breaks: Vec<usize> = (0..n.saturating_sub(1))
        .filter(|&k| !is_subset(&path.active_sets[k], &path.active_sets[k + 1]))
        .collect();

    let worst_sum_error = (0..n)
        .map(|k| (path.f_values[k].iter().sum::<f64>() - path.sigma_grid[k]).abs())
        .fold(0.0, f64::max);

    let multiplier_nonpositive = (0..n).all(|k| path.mu_values[k] <= path.kkt_tols[k]);
    let worst_mu = path
        .mu_values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    let active_within_equal_gradient = (0..n)
        .filter(|&k| path.sigma_grid[k] > 0.0)
        .all(|k| is_subset(&path.active_sets[k], &path.equal_gradient_sets[k]));
    let equal_gradient_excess: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&k| {
            path.sigma_grid[k] > 0.0
                && path.active_sets[k - 1] == path.active_sets[k]
                && path.active_sets[k + 1] == path.active_sets[k]
                && path.equal_gradient_sets[k] != path.active_sets[k]
        })
        .collect();

    let monotone = worst_decrease >= MONOTONE_TOL;
    let continuous = worst_slope_ratio <= SLOPE_JUMP;
    let filtration = filtration_breaks.is_empty();
    StructureReport {
        monotone,
        worst_decrease,
        continuous,
        worst_slope_ratio,
        filtration,
        filtration_breaks,
        worst_sum_error,
        multiplier_nonpositive,
        worst_mu,
        active_within_equal_gradient,
        equal_gradient_excess,
        passed: monotone
            && continuous
            && filtration
            && worst_sum_error <= SUM_TOL * path.sigma_max.max(1.0)
            && multiplier_nonpositive
            && active_within_equal_gradient,
    }
}
