//! Command dispatch behind the `rate-alloc` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::allocation_map::{self, AllocationPath, DEFAULT_GRID_SIZE};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::network::AllocationVector;
use crate::optimizer::{minimize_on_simplex, KktCertificate};
use crate::sampled_filter::{self, SampledSystem, Schedule};
use crate::sensitivity::grad_eta;

pub const DEFAULT_REFINE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Check,
    Eta,
    Optimize,
    Sweep,
    ScheduleSim,
    Asymptotic,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub grid: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Rounds to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

pub fn fmt12(x: f64) -> String {
    format!("{x:.11e}")
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if !n.is_i64() && !n.is_u64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round12(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

fn to_json<T: Serialize>(value: &T) -> Value {
    let mut v = serde_json::to_value(value).expect("report serializes");
    round_value(&mut v);
    v
}

fn write(out: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents)
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))?;
    files.push(path);
    Ok(())
}

fn write_json(out: &Path, name: &str, value: &Value, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json renders");
    text.push('\n');
    write(out, name, &text, files)
}

fn require<T: Clone>(v: &Option<T>, field: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::InvalidInput(format!("problem.{field}: required by this command")))
}

pub fn run_command(
    command: Command,
    config: &ScenarioConfig,
    out: &Path,
    overrides: &Overrides,
) -> Result<CommandOutput> {
    fs::create_dir_all(out)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", out.display())))?;
    let network = config.build_network()?;
    let mut opts = config.solver.options();
    if let Some(tol) = overrides.tol {
        if !(tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "--tol must be positive, got {tol}"
            )));
        }
        opts.tol = tol;
    }
    let problem = &config.problem;
    let mut files = Vec::new();

    let summary = match command {
        Command::Check => {
            let report = network.check_assumption1();
            let satisfied = report.satisfied();
            let mut v = to_json(&report);
            v["satisfied"] = json!(satisfied);
            write_json(out, "check.json", &v, &mut files)?;
            let mut s = String::new();
            for r in &report.subsystems {
                let _ = writeln!(
                    s,
                    "subsystem {}: observable={} g_nonsingular={} regular={}",
                    r.index + 1,
                    r.observable,
                    r.g_nonsingular,
                    r.regular_triplet
                );
            }
            let _ = write!(
                s,
                "network observable={} satisfied={satisfied}",
                report.network_observable
            );
            s
        }
        Command::Eta => {
            let gamma = AllocationVector::new(require(&problem.gamma, "gamma")?)?;
            let record = grad_eta(&gamma, &network)?;
            let v = to_json(&json!({
                "gamma": record.gamma.gamma(),
                "eta": record.eta,
                "grad": record.grad,
            }));
            write_json(out, "eta.json", &v, &mut files)?;
            format!("eta = {}", fmt12(record.eta))
        }
        Command::Optimize => {
            let sigma = require(&problem.sigma, "sigma")?;
            let best = minimize_on_simplex(&network, sigma, None, &opts)?;
            let spread = restart_spread(config, &best, &opts)?;
            let mut v = to_json(&best);
            v["restart_spread"] = json!(round12(spread));
            write_json(out, "optimize.json", &v, &mut files)?;
            let gamma: Vec<String> = best.gamma().iter().map(|&x| fmt12(x)).collect();
            format!(
                "gamma* = [{}], mu = {}, eta = {}, kkt violation = {}",
                gamma.join(", "),
                fmt12(best.mu),
                fmt12(best.eta),
                fmt12(best.max_violation)
            )
        }
        Command::Sweep => {
            let sigma_max = config.sigma_max()?;
            let grid = overrides
                .grid
                .or(problem.grid_size)
                .unwrap_or(DEFAULT_GRID_SIZE);
            let refine_tol = problem.refine_tol.unwrap_or(DEFAULT_REFINE_TOL);
            let mut path = allocation_map::sweep(&network, sigma_max, grid, &opts)?;
            path.breakpoints =
                allocation_map::detect_breakpoints(&path, &network, refine_tol, &opts)?;
            let report = allocation_map::verify_structure(&path);
            write(out, "sweep.csv", &sweep_csv(&path), &mut files)?;
            let v = to_json(&json!({
                "sigma_max": path.sigma_max,
                "breakpoints": path.breakpoints,
                "structure": report,
                "failures": path.failures,
            }));
            write_json(out, "sweep.json", &v, &mut files)?;
            if !path.failures.is_empty() {
                let detail: Vec<String> = path
                    .failures
                    .iter()
                    .map(|f| format!("sigma = {}: {}", fmt12(f.sigma), f.message))
                    .collect();
                return Err(Error::NumericalFailure(format!(
                    "{} grid points failed; partial path written\n{}",
                    detail.len(),
                    detail.join("\n")
                )));
            }
            let bps: Vec<String> = path.breakpoints.iter().map(|&b| fmt12(b)).collect();
            format!(
                "{} grid points, breakpoints [{}], structure {}",
                path.len(),
                bps.join(", "),
                if report.passed { "ok" } else { "violated" }
            )
        }
        Command::ScheduleSim => {
            let tau0 = require(&problem.tau0, "tau0")?;
            let schedule = match (&problem.schedule, &problem.schedule_counts) {
                (Some(slots), _) => Schedule::new(slots.clone(), network.len(), 1, tau0)?,
                (None, Some(counts)) => Schedule::round_robin(counts, tau0)?,
                (None, None) => {
                    return Err(Error::InvalidInput(
                        "problem: schedule-sim needs schedule or schedule_counts".into(),
                    ))
                }
            };
            let system = SampledSystem::from_network(&network, &schedule)?;
            let dim = network.state_dim();
            let steady = sampled_filter::steady_state_schedule(
                &schedule,
                &system,
                &DMatrix::zeros(dim, dim),
                config.solver.steady_tol,
                config.solver.max_periods,
            )?;
            let v = to_json(&json!({
                "slots": schedule.slots(),
                "counts": schedule.counts(),
                "tau0": schedule.tau0(),
                "tau": schedule.tau(),
                "eta_bar": steady.error,
                "iterations": steady.iterations,
                "residual": steady.residual,
            }));
            write_json(out, "schedule.json", &v, &mut files)?;
            format!(
                "eta_bar = {} after {} periods",
                fmt12(steady.error),
                steady.iterations
            )
        }
        Command::Asymptotic => {
            let counts = require(&problem.schedule_counts, "schedule_counts")?;
            let taus = require(&problem.tau_list, "tau_list")?;
            let rows = sampled_filter::asymptotic_gap(&counts, &network, &taus)?;
            let mut csv = String::from("tau,tau0,eta_bar,eta_continuous,gap\n");
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    fmt12(r.tau),
                    fmt12(r.tau0),
                    fmt12(r.eta_bar),
                    fmt12(r.eta_continuous),
                    fmt12(r.gap)
                );
            }
            write(out, "asymptotic.csv", &csv, &mut files)?;
            write_json(out, "asymptotic.json", &to_json(&rows), &mut files)?;
            let last = rows.last().map_or(f64::NAN, |r| r.gap);
            format!(
                "{} periods, smallest-period gap {}",
                rows.len(),
                fmt12(last)
            )
        }
    };
    Ok(CommandOutput { files, summary })
}

/// Largest distance from `best` over seeded random restarts.
fn restart_spread(
    config: &ScenarioConfig,
    best: &KktCertificate,
    opts: &crate::optimizer::SolverOptions,
) -> Result<f64> {
    let restarts = config.problem.restarts.unwrap_or(0);
    let n = best.gamma().len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
    let network = config.build_network()?;
    let mut spread = 0.0f64;
    for _ in 0..restarts {
        // Uniform on the simplex via normalized exponentials.
        let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let total: f64 = w.iter().sum();
        let start = AllocationVector::new(w.iter().map(|x| best.sigma * x / total).collect())?;
        let other = minimize_on_simplex(&network, best.sigma, Some(&start), opts)?;
        let d = other
            .gamma()
            .iter()
            .zip(best.gamma())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        spread = spread.max(d);
    }
    Ok(spread)
}

pub fn sweep_csv(path: &AllocationPath) -> String {
    let n = path.sensors();
    let mut csv = String::from("sigma");
    for i in 1..=n {
        let _ = write!(csv, ",gamma_{i}");
    }
    csv.push_str(",mu,eta,active_set\n");
    for k in 0..path.len() {
        csv.push_str(&fmt12(path.sigma_grid[k]));
        for &g in &path.f_values[k] {
            csv.push(',');
            csv.push_str(&fmt12(g));
        }
        let bits: String = (0..n)
            .map(|i| {
                if path.active_sets[k].contains(&i) {
                    '1'
                } else {
                    '0'
                }
            })
            .collect();
        let _ = writeln!(
            csv,
            ",{},{},{bits}",
            fmt12(path.mu_values[k]),
            fmt12(path.eta_values[k])
        );
    }
    csv
}
