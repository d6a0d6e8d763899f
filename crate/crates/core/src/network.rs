//! Weakly coupled network of linear subsystems and the steady-state cost
//! `eta(gamma) = tr Sigma(gamma)` of its continuous-observation Kalman-Bucy filter.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, CareProblem, RankTest, RANK_TOL};
use crate::sensitivity;

pub const DEFAULT_R_MIN: f64 = 1e-3;

/// One block `(A_i, G_i, c_i)` of the network; `c_i` is `n x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSubsystem {
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSubsystem {
    pub fn new(a: DMatrix<f64>, g: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::InvalidInput(format!(
                "subsystem drift must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if g.nrows() != n || g.ncols() != n {
            return Err(Error::InvalidInput(format!(
                "noise gain must be {n}x{n}, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        if c.nrows() != n || c.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "observation matrix must be {n}xp with p >= 1, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        for (name, m) in [("A", &a), ("G", &g), ("c", &c)] {
            if !linalg::all_finite(m) {
                return Err(Error::InvalidInput(format!(
                    "subsystem {name} has non-finite entries"
                )));
            }
        }
        Ok(Self { a, g, c })
    }

    /// Scalar subsystem `dx = a x dt + g dw`, observed through `c`.
    pub fn scalar(a: f64, g: f64, c: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, g),
            DMatrix::from_element(1, 1, c),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn noise(&self) -> DMatrix<f64> {
        &self.g * self.g.transpose()
    }
}

/// Off-diagonal drift block: `dx_row += epsilon * matrix * x_col`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub row: usize,
    pub col: usize,
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct CoupledNetwork {
    subsystems: Vec<LinearSubsystem>,
    couplings: Vec<Coupling>,
    epsilon: f64,
    r_min: f64,
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    c: DMatrix<f64>,
    observability: RankTest,
}

impl CoupledNetwork {
    pub fn new(
        subsystems: Vec<LinearSubsystem>,
        couplings: Vec<Coupling>,
        epsilon: f64,
        r_min: f64,
    ) -> Result<Self> {
        let Some(first) = subsystems.first() else {
            return Err(Error::InvalidInput("network has no subsystems".into()));
        };
        let n = first.state_dim();
        let p = first.output_dim();
        for (i, s) in subsystems.iter().enumerate() {
            if s.state_dim() != n || s.output_dim() != p {
                return Err(Error::InvalidInput(format!(
                    "subsystem {i} is {}-state/{}-output, expected {n}/{p}",
                    s.state_dim(),
                    s.output_dim()
                )));
            }
        }
        let count = subsystems.len();
        for k in &couplings {
            if k.row >= count || k.col >= count || k.row == k.col {
                return Err(Error::InvalidInput(format!(
                    "coupling ({}, {}) must join two distinct subsystems in 0..{count}",
                    k.row, k.col
                )));
            }
            if k.matrix.nrows() != n || k.matrix.ncols() != n {
                return Err(Error::InvalidInput(format!(
                    "coupling ({}, {}) must be {n}x{n}, got {}x{}",
                    k.row,
                    k.col,
                    k.matrix.nrows(),
                    k.matrix.ncols()
                )));
            }
            if !linalg::all_finite(&k.matrix) {
                return Err(Error::InvalidInput(format!(
                    "coupling ({}, {}) has non-finite entries",
                    k.row, k.col
                )));
            }
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "coupling strength must be finite and nonnegative, got {epsilon}"
            )));
        }
        if !(r_min > 0.0) || !r_min.is_finite() {
            return Err(Error::InvalidInput(format!(
                "floor rate must be positive, got {r_min}"
            )));
        }

        let dim = n * count;
        let mut a = DMatrix::zeros(dim, dim);
        let mut g = DMatrix::zeros(dim, dim);
        let mut c = DMatrix::zeros(dim, p * count);
        for (i, s) in subsystems.iter().enumerate() {
            a.view_mut((i * n, i * n), (n, n)).copy_from(&s.a);
            g.view_mut((i * n, i * n), (n, n)).copy_from(&s.g);
            c.view_mut((i * n, i * p), (n, p)).copy_from(&s.c);
        }
        for k in &couplings {
            let mut block = a.view_mut((k.row * n, k.col * n), (n, n));
            block += &k.matrix * epsilon;
        }
        let observability = linalg::is_observable(&a, &c);
        Ok(Self {
            subsystems,
            couplings,
            epsilon,
            r_min,
            a,
            g,
            c,
            observability,
        })
    }

    pub fn subsystems(&self) -> &[LinearSubsystem] {
        &self.subsystems
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn block_dim(&self) -> usize {
        self.subsystems[0].state_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.subsystems[0].output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// The assembled `nN x nN` drift and noise gain.
    pub fn assemble(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.a, &self.g)
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn process_noise(&self) -> DMatrix<f64> {
        &self.g * self.g.transpose()
    }

    /// Unscaled block-diagonal observation matrix `diag(c_1, ..., c_N)`.
    pub fn observation_blocks(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Observation matrix of sensor `i` alone, zero outside its block (`nN x p`).
    pub fn padded_observation(&self, i: usize) -> DMatrix<f64> {
        let p = self.output_dim();
        self.c.columns(i * p, p).into_owned()
    }

    /// `C_i`: `c_i c_i^T` in block `(i, i)`, zero elsewhere.
    pub fn block_selector(&self, i: usize) -> DMatrix<f64> {
        let n = self.block_dim();
        let dim = self.state_dim();
        let mut out = DMatrix::zeros(dim, dim);
        let c = &self.subsystems[i].c;
        out.view_mut((i * n, i * n), (n, n))
            .copy_from(&(c * c.transpose()));
        out
    }

    /// Rank test of `(A, diag(c_i))` at the configured coupling strength.
    pub fn observability(&self) -> RankTest {
        self.observability
    }

    pub fn check_domain(&self, alloc: &AllocationVector) -> Result<()> {
        if alloc.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "allocation has {} entries, network has {} sensors",
                alloc.len(),
                self.len()
            )));
        }
        for (i, &g) in alloc.gamma().iter().enumerate() {
            if g + self.r_min < 0.0 {
                return Err(Error::Domain(format!(
                    "gamma[{i}] = {g} is below -r_min = {}",
                    -self.r_min
                )));
            }
        }
        Ok(())
    }

    /// `c_gamma = diag(sqrt(gamma_i + r_min) c_i)`.
    pub fn observation_matrix(&self, alloc: &AllocationVector) -> Result<DMatrix<f64>> {
        self.check_domain(alloc)?;
        let p = self.output_dim();
        let mut c = self.c.clone();
        for (i, rate) in alloc.rates(self.r_min).into_iter().enumerate() {
            let mut cols = c.columns_mut(i * p, p);
            cols *= rate.max(0.0).sqrt();
        }
        Ok(c)
    }

    /// Riccati problem whose stabilizing solution is `Sigma(gamma)`.
    pub fn care_problem(&self, alloc: &AllocationVector) -> Result<CareProblem> {
        let c = self.observation_matrix(alloc)?;
        let all_positive = alloc.rates(self.r_min).iter().all(|&r| r > 0.0);
        let observable = if all_positive {
            self.observability.full_rank
        } else {
            linalg::is_observable(&self.a, &c).full_rank
        };
        if !observable {
            return Err(Error::Domain(
                "(A, c_gamma) is not observable at this coupling strength".into(),
            ));
        }
        CareProblem::from_observation(self.a.clone(), &c, self.process_noise())
    }

    pub fn covariance(&self, alloc: &AllocationVector) -> Result<DMatrix<f64>> {
        linalg::solve_care(&self.care_problem(alloc)?)
    }

    /// Steady-state mean-squared estimation error.
    pub fn eta(&self, alloc: &AllocationVector) -> Result<f64> {
        Ok(self.covariance(alloc)?.trace())
    }

    pub fn check_assumption1(&self) -> AssumptionReport {
        let subsystems = self
            .subsystems
            .iter()
            .enumerate()
            .map(|(index, s)| SubsystemReport::evaluate(index, s))
            .collect();
        AssumptionReport {
            subsystems,
            network_observable: self.observability.full_rank,
            network_observability_margin: self.observability.min_singular_value,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SubsystemReport {
    pub index: usize,
    pub observable: bool,
    pub observability_margin: f64,
    pub g_nonsingular: bool,
    pub g_min_singular_value: f64,
    pub regular_triplet: bool,
    pub controllability_margin: Option<f64>,
    pub note: Option<String>,
}

impl SubsystemReport {
    fn evaluate(index: usize, s: &LinearSubsystem) -> Self {
        let obs = linalg::is_observable(&s.a, &s.c);
        let sv = s.g.singular_values();
        let g_max = sv.max();
        let g_min = sv.min();
        let g_nonsingular = g_max > 0.0 && g_min > RANK_TOL * g_max;
        let (regular_triplet, controllability_margin, note) =
            match sensitivity::is_regular_triplet(&s.a, &s.c, &s.noise()) {
                Ok(r) => (r.is_regular, Some(r.controllability_margin), None),
                Err(e) => (false, None, Some(e.to_string())),
            };
        Self {
            index,
            observable: obs.full_rank,
            observability_margin: obs.min_singular_value,
            g_nonsingular,
            g_min_singular_value: g_min,
            regular_triplet,
            controllability_margin,
            note,
        }
    }

    pub fn satisfied(&self) -> bool {
        self.observable && self.g_nonsingular && self.regular_triplet
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AssumptionReport {
    pub subsystems: Vec<SubsystemReport>,
    pub network_observable: bool,
    pub network_observability_margin: f64,
}

impl AssumptionReport {
    pub fn satisfied(&self) -> bool {
        self.network_observable && self.subsystems.iter().all(SubsystemReport::satisfied)
    }
}

/// Excess rates `gamma_i = r_i - r_min` handed to each sensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationVector {
    gamma: Vec<f64>,
}

impl AllocationVector {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidInput("allocation is empty".into()));
        }
        if let Some(i) = gamma.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gamma[{i}] = {} is not finite",
                gamma[i]
            )));
        }
        Ok(Self { gamma })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            gamma: vec![0.0; len],
        }
    }

    /// Barycenter of `Sp[sigma]`.
    pub fn uniform(len: usize, sigma: f64) -> Self {
        Self {
            gamma: vec![sigma / len as f64; len],
        }
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        self.gamma.iter().sum()
    }

    /// Per-sensor rates `r_i = gamma_i + r_min`.
    pub fn rates(&self, r_min: f64) -> Vec<f64> {
        self.gamma.iter().map(|g| g + r_min).collect()
    }

    pub fn is_on_simplex(&self, sigma: f64, tol: f64) -> bool {
        let scale = sigma.abs().max(1.0);
        self.gamma.iter().all(|&g| g >= 0.0) && (self.sigma() - sigma).abs() <= tol * scale
    }

    pub fn with_offset(&self, i: usize, delta: f64) -> Self {
        let mut gamma = self.gamma.clone();
        gamma[i] += delta;
        Self { gamma }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn scalar_eta(a: f64, g2: f64, r: f64) -> f64 {
        (a + (a * a + r * g2).sqrt()) / r
    }

    fn scalar_pair(eps: f64) -> CoupledNetwork {
        CoupledNetwork::new(
            vec![
                LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(),
                LinearSubsystem::scalar(-2.0, 1.5, 1.0).unwrap(),
            ],
            vec![
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
            ],
            eps,
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn assembly_blocks() {
        let net = scalar_pair(0.1);
        let (a, g) = net.assemble();
        assert_eq!(a, &dmatrix![-1.0, 0.1; 0.1, -2.0]);
        assert_eq!(g, &dmatrix![1.0, 0.0; 0.0, 1.5]);

        let decoupled = scalar_pair(0.0);
        assert_eq!(decoupled.drift(), &dmatrix![-1.0, 0.0; 0.0, -2.0]);

        let doubled = scalar_pair(0.2);
        assert_eq!(doubled.drift()[(0, 1)], 2.0 * net.drift()[(0, 1)]);
        assert_eq!(doubled.drift()[(1, 0)], 2.0 * net.drift()[(1, 0)]);
    }

    #[test]
    fn assembly_rejects_bad_dimensions() {
        let r = CoupledNetwork::new(
            vec![
                LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(),
                LinearSubsystem::new(
                    DMatrix::identity(2, 2) * -1.0,
                    DMatrix::identity(2, 2),
                    dmatrix![1.0; 0.0],
                )
                .unwrap(),
            ],
            vec![],
            0.0,
            0.01,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let r = CoupledNetwork::new(
            vec![LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(); 2],
            vec![Coupling {
                row: 0,
                col: 1,
                matrix: dmatrix![1.0, 0.0],
            }],
            0.0,
            0.01,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        assert!(LinearSubsystem::new(dmatrix![1.0, 2.0], dmatrix![1.0], dmatrix![1.0]).is_err());
    }

    #[test]
    fn observation_matrix_scaling() {
        let net = scalar_pair(0.1);
        let c0 = net.observation_matrix(&AllocationVector::zeros(2)).unwrap();
        assert!((c0[(0, 0)] - 0.1).abs() < 1e-15);
        assert!((c0[(1, 1)] - 0.1).abs() < 1e-15);

        let edge = AllocationVector::new(vec![-0.01, 0.5]).unwrap();
        let c = net.observation_matrix(&edge).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert!((c[(1, 1)] - 0.51f64.sqrt()).abs() < 1e-15);

        let base = AllocationVector::new(vec![0.09, 0.0]).unwrap();
        let quad = AllocationVector::new(vec![0.39, 0.0]).unwrap();
        let cb = net.observation_matrix(&base).unwrap();
        let cq = net.observation_matrix(&quad).unwrap();
        assert!((cq[(0, 0)] - 2.0 * cb[(0, 0)]).abs() < 1e-15);

        let outside = AllocationVector::new(vec![-0.02, 0.0]).unwrap();
        assert!(matches!(
            net.observation_matrix(&outside),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn decoupled_eta_is_sum_of_scalar_roots() {
        let net = scalar_pair(0.0);
        let alloc = AllocationVector::new(vec![0.7, 1.3]).unwrap();
        let expected = scalar_eta(-1.0, 1.0, 0.71) + scalar_eta(-2.0, 2.25, 1.31);
        assert!((net.eta(&alloc).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn eta_symmetric_under_permutation() {
        let net = CoupledNetwork::new(
            vec![LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(); 2],
            vec![
                Coupling {
                    row: 0,
                    col: 1,
                    matrix: dmatrix![0.5],
                },
                Coupling {
                    row: 1,
                    col: 0,
                    matrix: dmatrix![0.5],
                },
            ],
            0.1,
            DEFAULT_R_MIN,
        )
        .unwrap();
        let a = net
            .eta(&AllocationVector::new(vec![0.3, 1.1]).unwrap())
            .unwrap();
        let b = net
            .eta(&AllocationVector::new(vec![1.1, 0.3]).unwrap())
            .unwrap();
        assert!((a - b).abs() < 1e-12);
        let a = net
            .eta(&AllocationVector::new(vec![2.0, 0.0]).unwrap())
            .unwrap();
        let b = net
            .eta(&AllocationVector::new(vec![0.0, 2.0]).unwrap())
            .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn eta_rejects_unobservable_network() {
        let net = CoupledNetwork::new(
            vec![
                LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap(),
                LinearSubsystem::scalar(1.0, 1.0, 0.0).unwrap(),
            ],
            vec![],
            0.0,
            0.01,
        )
        .unwrap();
        assert!(!net.observability().full_rank);
        let r = net.eta(&AllocationVector::zeros(2));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn assumption_report() {
        let scalar = CoupledNetwork::new(
            vec![LinearSubsystem::scalar(-1.0, 1.0, 1.0).unwrap()],
            vec![],
            0.0,
            0.01,
        )
        .unwrap();
        let report = scalar.check_assumption1();
        assert!(report.satisfied());

        // diag(-1, -2) observed through (1, 1), G the Cholesky factor of [[5, -3], [-3, 4]].
        let l11 = 5f64.sqrt();
        let l21 = -3.0 / l11;
        let l22 = (4.0 - l21 * l21).sqrt();
        let example = LinearSubsystem::new(
            dmatrix![-1.0, 0.0; 0.0, -2.0],
            dmatrix![l11, 0.0; l21, l22],
            dmatrix![1.0; 1.0],
        )
        .unwrap();
        let net = CoupledNetwork::new(vec![example], vec![], 0.0, 0.01).unwrap();
        let row = &net.check_assumption1().subsystems[0];
        assert!(row.observable);
        assert!(row.g_nonsingular);
        assert!(!row.regular_triplet);

        let singular = LinearSubsystem::new(
            dmatrix![-1.0, 0.0; 0.0, -2.0],
            dmatrix![1.0, 0.0; 1.0, 0.0],
            dmatrix![1.0; 1.0],
        )
        .unwrap();
        let net = CoupledNetwork::new(vec![singular], vec![], 0.0, 0.01).unwrap();
        let row = &net.check_assumption1().subsystems[0];
        assert!(!row.g_nonsingular);
        assert!(!row.satisfied());
    }
}
