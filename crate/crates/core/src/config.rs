//! JSON scenario files: `network`, `problem` and `solver` sections.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CoupledNetwork, Coupling, LinearSubsystem, DEFAULT_R_MIN};
use crate::optimizer::{SolverOptions, DEFAULT_KKT_REL};
use crate::sampled_filter::{DEFAULT_MAX_PERIODS, DEFAULT_STEADY_TOL};

pub const DEFAULT_SEED: u64 = 42;

/// Row-major matrix; a flat list is read as a single column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Column(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, path: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Column(v) => {
                if v.is_empty() {
                    return Err(invalid(path, "is empty"));
                }
                Ok(DMatrix::from_column_slice(v.len(), 1, v))
            }
            MatrixSpec::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 {
                    return Err(invalid(path, "is empty"));
                }
                if let Some(k) = rows.iter().position(|r| r.len() != cols) {
                    return Err(invalid(
                        &format!("{path}[{k}]"),
                        &format!("has {} entries, expected {cols}", rows[k].len()),
                    ));
                }
                Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
            }
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSpec {
    pub a: MatrixSpec,
    pub g: MatrixSpec,
    pub c: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub row: usize,
    pub col: usize,
    pub matrix: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub subsystems: Vec<SubsystemSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub couplings: Vec<CouplingSpec>,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
}

fn default_r_min() -> f64 {
    DEFAULT_R_MIN
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// Capacity for `optimize`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Upper end of the sweep; derived from `r_tot` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_tot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_tol: Option<f64>,
    /// Allocation for `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    /// Slot counts per sensor for `schedule-sim` and `asymptotic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_counts: Option<Vec<usize>>,
    /// Explicit slot order for `schedule-sim`; round-robin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau0: Option<f64>,
    /// Periods `tau` for `asymptotic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_list: Option<Vec<f64>>,
    /// Extra randomized starts for `optimize`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_kkt_rel")]
    pub kkt_rel: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_steady_tol")]
    pub steady_tol: f64,
    #[serde(default = "default_max_periods")]
    pub max_periods: usize,
}

fn default_tol() -> f64 {
    SolverOptions::default().tol
}
fn default_kkt_rel() -> f64 {
    DEFAULT_KKT_REL
}
fn default_max_iter() -> usize {
    SolverOptions::default().max_iter
}
fn default_steady_tol() -> f64 {
    DEFAULT_STEADY_TOL
}
fn default_max_periods() -> usize {
    DEFAULT_MAX_PERIODS
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            kkt_rel: default_kkt_rel(),
            max_iter: default_max_iter(),
            steady_tol: default_steady_tol(),
            max_periods: default_max_periods(),
        }
    }
}

impl SolverSpec {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            kkt_rel: self.kkt_rel,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

fn invalid(path: &str, what: &str) -> Error {
    Error::InvalidInput(format!("{path}: {what}"))
}

fn at(path: &str, e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("{path}: {m}")),
        other => other,
    }
}

impl ScenarioConfig {
    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| {
            Error::InvalidInput(format!(
                "config parse error at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.problem.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn validate(&self) -> Result<()> {
        self.build_network()?;
        let p = &self.problem;
        let positive = |v: Option<f64>, path: &str| match v {
            Some(x) if !(x > 0.0) || !x.is_finite() => Err(invalid(path, "must be positive")),
            _ => Ok(()),
        };
        if let Some(s) = p.sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(invalid("problem.sigma", "must be finite and nonnegative"));
            }
        }
        positive(p.sigma_max, "problem.sigma_max")?;
        positive(p.r_tot, "problem.r_tot")?;
        positive(p.refine_tol, "problem.refine_tol")?;
        positive(p.tau0, "problem.tau0")?;
        if let Some(g) = p.grid_size {
            if g < 2 {
                return Err(invalid("problem.grid_size", "must be at least 2"));
            }
        }
        if let Some(list) = &p.tau_list {
            for (k, &t) in list.iter().enumerate() {
                positive(Some(t), &format!("problem.tau_list[{k}]"))?;
            }
        }
        let n = self.network.subsystems.len();
        for (name, v) in [
            ("gamma", p.gamma.as_ref().map(Vec::len)),
            ("schedule_counts", p.schedule_counts.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = v {
                if len != n {
                    return Err(invalid(
                        &format!("problem.{name}"),
                        &format!("has {len} entries for {n} subsystems"),
                    ));
                }
            }
        }
        if let Some(slots) = &p.schedule {
            if let Some(k) = slots.iter().position(|&s| s >= n) {
                return Err(invalid(
                    &format!("problem.schedule[{k}]"),
                    "is not a sensor index",
                ));
            }
        }
        let s = &self.solver;
        for (path, v) in [
            ("solver.tol", s.tol),
            ("solver.kkt_rel", s.kkt_rel),
            ("solver.steady_tol", s.steady_tol),
        ] {
            positive(Some(v), path)?;
        }
        if s.max_iter == 0 || s.max_periods == 0 {
            return Err(invalid("solver", "iteration budgets must be positive"));
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<CoupledNetwork> {
        let net = &self.network;
        if net.subsystems.is_empty() {
            return Err(invalid(
                "network.subsystems",
                "needs at least one subsystem",
            ));
        }
        if !(net.epsilon >= 0.0) || !net.epsilon.is_finite() {
            return Err(invalid("network.epsilon", "must be finite and nonnegative"));
        }
        if !(net.r_min > 0.0) || !net.r_min.is_finite() {
            return Err(invalid("network.r_min", "must be positive"));
        }
        let subsystems = net
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let base = format!("network.subsystems[{i}]");
                let a = s.a.to_matrix(&format!("{base}.a"))?;
                let g = s.g.to_matrix(&format!("{base}.g"))?;
                let c = s.c.to_matrix(&format!("{base}.c"))?;
                LinearSubsystem::new(a, g, c).map_err(|e| at(&base, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let couplings = net
            .couplings
            .iter()
            .enumerate()
            .map(|(k, c)| {
                Ok(Coupling {
                    row: c.row,
                    col: c.col,
                    matrix: c
                        .matrix
                        .to_matrix(&format!("network.couplings[{k}].matrix"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CoupledNetwork::new(subsystems, couplings, net.epsilon, net.r_min)
            .map_err(|e| at("network", e))
    }

    /// `sigma_max` as given, else `r_tot - N r_min`.
    pub fn sigma_max(&self) -> Result<f64> {
        if let Some(s) = self.problem.sigma_max {
            return Ok(s);
        }
        let r_tot = self
            .problem
            .r_tot
            .ok_or_else(|| invalid("problem", "needs sigma_max or r_tot"))?;
        let s = r_tot - self.network.subsystems.len() as f64 * self.network.r_min;
        if !(s > 0.0) {
            return Err(invalid(
                "problem.r_tot",
                &format!("leaves no capacity above the floor rates (sigma_max = {s})"),
            ));
        }
        Ok(s)
    }
}
