//! Dense kernels shared by the filter, cost and optimizer layers.
//!
//! Everything here works on `nalgebra::DMatrix<f64>` and is a pure function
//! of its arguments. Sizes are small (a few dozen states at most), so the
//! solvers favour direct dense methods over anything iterative or sparse.

use nalgebra::{DMatrix, Dyn, LU};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used by the rank tests.
pub const RANK_TOL: f64 = 1e-10;

/// Eigenvalues with real part at or above `-HURWITZ_MARGIN` are treated as unstable.
pub const HURWITZ_MARGIN: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius norm that does not overflow for entries near `f64::MAX.sqrt()`.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    let big = m.amax();
    if big == 0.0 || !big.is_finite() {
        return big;
    }
    big * (m / big).norm()
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol * m.norm().max(1.0)
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest real part over the spectrum of a general square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < -HURWITZ_MARGIN
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} has non-finite entries"
        )))
    }
}

fn check_square(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

// Degree-13 diagonal Pade coefficients.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(A t)` by scaling and squaring around a fixed degree-13 Pade approximant.
pub fn mat_exp(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_square("A", a)?;
    check_finite("A", a)?;
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("time {t} is not finite")));
    }
    let n = a.nrows();
    let at = a * t;
    let norm = one_norm(&at);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = at * 2f64.powi(-squarings);

    let b = &PADE13;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::NumericalFailure("Pade denominator is singular".into()))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Factored operator `X -> F X + X F^T` for repeated Lyapunov solves with one `F`.
///
/// The unknown is vectorized column-major and the `n^2 x n^2` Kronecker system
/// `(I (x) F + F (x) I)` is LU-factored once.
pub struct LyapunovOperator {
    n: usize,
    lu: LU<f64, Dyn, Dyn>,
}

impl LyapunovOperator {
    pub fn new(f: &DMatrix<f64>) -> Result<Self> {
        check_square("F", f)?;
        check_finite("F", f)?;
        let abscissa = spectral_abscissa(f);
        if abscissa >= -HURWITZ_MARGIN {
            return Err(Error::SolverPrecondition(format!(
                "Lyapunov coefficient is not Hurwitz (spectral abscissa {abscissa:.3e})"
            )));
        }
        let n = f.nrows();
        let mut kron = DMatrix::<f64>::zeros(n * n, n * n);
        for j in 0..n {
            for i in 0..n {
                let row = i + j * n;
                for k in 0..n {
                    kron[(row, k + j * n)] += f[(i, k)];
                    kron[(row, i + k * n)] += f[(j, k)];
                }
            }
        }
        Ok(Self { n, lu: kron.lu() })
    }

    /// Solves `F X + X F^T + Q = 0` without symmetrizing the result.
    pub fn solve_raw(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n;
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::InvalidInput(format!(
                "Q must be {n}x{n}, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        check_finite("Q", q)?;
        let rhs = DMatrix::from_iterator(n * n, 1, q.iter().map(|x| -x));
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::NumericalFailure("Kronecker system is singular".into()))?;
        if !all_finite(&x) {
            return Err(Error::NumericalFailure(
                "Lyapunov solution has non-finite entries".into(),
            ));
        }
        Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
    }

    pub fn solve(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.solve_raw(q).map(|x| symmetrize(&x))
    }
}

/// Solves `F X + X F^T + Q = 0` for Hurwitz `F` and symmetric `Q`.
pub fn solve_lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    LyapunovOperator::new(f)?.solve(q)
}

/// Continuous algebraic Riccati equation `A X + X A^T - X S X + P = 0`
/// in filter form.
#[derive(Debug, Clone)]
pub struct CareProblem {
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

const PSD_TOL: f64 = 1e-12;

impl CareProblem {
    pub fn new(a: DMatrix<f64>, s: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        check_square("A", &a)?;
        let n = a.nrows();
        for (name, m) in [("S", &s), ("P", &p)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidInput(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            check_finite(name, m)?;
            if !is_symmetric(m, PSD_TOL) {
                return Err(Error::InvalidInput(format!("{name} is not symmetric")));
            }
            let lo = min_sym_eigenvalue(m);
            if lo < -PSD_TOL * m.norm().max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} is not positive semidefinite (min eigenvalue {lo:.3e})"
                )));
            }
        }
        check_finite("A", &a)?;
        Ok(Self { a, s, p })
    }

    /// Filter-form problem with `S = C C^T`.
    pub fn from_observation(a: DMatrix<f64>, c: &DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        let s = c * c.transpose();
        Self::new(a, s, p)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn residual(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * x + x * self.a.transpose() - x * &self.s * x + &self.p
    }

    pub fn closed_loop(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a - x * &self.s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CareOptions {
    pub max_iter: usize,
    /// Accepted residual, relative to `max(1, ||P||, 2 ||A X||, ||X S X||)` (Frobenius).
    pub residual_tol: f64,
}

impl Default for CareOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            residual_tol: 1e-9,
        }
    }
}

pub fn solve_care(problem: &CareProblem) -> Result<DMatrix<f64>> {
    solve_care_with(problem, &CareOptions::default())
}

/// Newton-Kleinman iteration. Each step solves a Lyapunov equation in the
/// current closed loop; the start is zero for Hurwitz `A`, otherwise a
/// Bass-type shifted gain.
pub fn solve_care_with(problem: &CareProblem, opts: &CareOptions) -> Result<DMatrix<f64>> {
    let n = problem.dim();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let a = &problem.a;
    let s = &problem.s;
    let p = &problem.p;
    let scale = p.norm().max(1.0);

    let mut x = if is_hurwitz(a) {
        DMatrix::zeros(n, n)
    } else {
        stabilizing_start(a, s)?
    };

    let mut residual = f64::INFINITY;
    let mut last_step = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let closed = problem.closed_loop(&x);
        let q = &x * s * &x + p;
        let raw = LyapunovOperator::new(&closed)
            .map_err(|e| match e {
                Error::SolverPrecondition(msg) => Error::NumericalFailure(format!(
                    "Newton iterate lost closed-loop stability: {msg}"
                )),
                other => other,
            })?
            .solve_raw(&q)?;
        let norm = raw.norm().max(1.0);
        if asymmetry(&raw) > 1e-8 * norm {
            return Err(Error::NumericalFailure(format!(
                "Riccati iterate lost symmetry ({:.3e})",
                asymmetry(&raw)
            )));
        }
        let next = symmetrize(&raw);
        let step = (&next - &x).norm();
        x = next;
        residual = problem.residual(&x).norm();
        if step <= 1e-14 * norm || residual <= 1e-15 * scale {
            break;
        }
        // Past the quadratic phase the step only wanders at roundoff level.
        if step <= 1e-10 * norm && step >= last_step {
            break;
        }
        last_step = step;
    }
    // Roundoff in the residual grows with the size of its individual terms.
    let terms = scale.max(2.0 * (a * &x).norm()).max((&x * s * &x).norm());
    if !(residual <= opts.residual_tol * terms) {
        return Err(Error::Convergence {
            what: "Riccati Newton iteration",
            iterations,
            residual,
        });
    }
    Ok(x)
}

fn stabilizing_start(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = -(a.transpose() + DMatrix::<f64>::identity(n, n) * beta);
    let w = solve_lyapunov(&shifted, &(s * 2.0))?;
    let x = w
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Domain("no stabilizing start: (A, c) appears unobservable".into()))?;
    let x = symmetrize(&x);
    if !all_finite(&x) || !is_hurwitz(&(a - &x * s)) {
        return Err(Error::Domain(
            "no stabilizing start: (A, c) appears unobservable".into(),
        ));
    }
    Ok(x)
}

/// Outcome of a Krylov rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTest {
    pub full_rank: bool,
    pub rank: usize,
    /// n-th largest singular value of the Krylov matrix; zero when rank-deficient
    /// in exact arithmetic.
    pub min_singular_value: f64,
    /// Smallest singular value above the rank cutoff.
    pub smallest_retained: f64,
}

fn krylov_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> RankTest {
    let n = a.nrows();
    let m = b.ncols();
    if n == 0 {
        return RankTest {
            full_rank: true,
            rank: 0,
            min_singular_value: 0.0,
            smallest_retained: 0.0,
        };
    }
    if b.nrows() != n || m == 0 || !all_finite(a) || !all_finite(b) {
        return RankTest {
            full_rank: false,
            rank: 0,
            min_singular_value: 0.0,
            smallest_retained: 0.0,
        };
    }
    let mut krylov = DMatrix::<f64>::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        krylov.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let mut sv: Vec<f64> = krylov.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let cutoff = RANK_TOL * sv[0];
    let rank = if sv[0] > 0.0 {
        sv.iter().filter(|&&v| v > cutoff).count()
    } else {
        0
    };
    RankTest {
        full_rank: rank == n,
        rank,
        min_singular_value: sv.get(n - 1).copied().unwrap_or(0.0),
        smallest_retained: if rank > 0 { sv[rank - 1] } else { 0.0 },
    }
}

/// Rank of `[C, A^T C, ..., (A^T)^{n-1} C]`.
pub fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> RankTest {
    krylov_rank(&a.transpose(), c)
}

/// Rank of `[B, A B, ..., A^{n-1} B]`.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> RankTest {
    krylov_rank(a, b)
}

/// `int_0^tau0 exp(A s) G G^T exp(A^T s) ds` through the Van Loan block exponential.
pub fn integrate_process_noise(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    tau0: f64,
) -> Result<DMatrix<f64>> {
    if !(tau0 > 0.0) || !tau0.is_finite() {
        return Err(Error::InvalidInput(format!(
            "slot duration must be positive, got {tau0}"
        )));
    }
    check_square("A", a)?;
    let n = a.nrows();
    if g.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "G must have {n} rows, got {}",
            g.nrows()
        )));
    }
    let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block
        .view_mut((0, n), (n, n))
        .copy_from(&(g * g.transpose()));
    block.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let e = mat_exp(&block, tau0)?;
    let transition = e.view((0, 0), (n, n)).into_owned();
    let coupling = e.view((0, n), (n, n)).into_owned();
    Ok(symmetrize(&(coupling * transition.transpose())))
}
