//! Linear-quadratic control under a convex generator: Riccati equation, offsets,
//! the compatibility condition, the `γ` fixed point and the optimal feedback.

mod closed_loop;
mod ode;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use closed_loop::{BoundedFeedback, ClosedLoop, ShadowPair};
pub use ode::DensePath;

use crate::error::ModelError;
use crate::gcore::{ConvexGenerator, TimeGrid};

#[derive(Debug, Error)]
pub enum LqError {
    #[error("gain matrix R + γDᵀPD is near singular at t = {t} (min eigenvalue {min_eig})")]
    GainSingularity { t: f64, min_eig: f64 },
    #[error("solution norm {norm} exceeds the blow-up bound at t = {t}")]
    BlowUp { t: f64, norm: f64 },
    #[error("γ iteration did not converge in {iterations} iterations (last step {step})")]
    NoFixedPoint { iterations: usize, step: f64 },
    #[error("γ fixed points from c_lo and c_hi differ by {gap}")]
    NonUniqueFixedPoint { gap: f64 },
    #[error("bisection bracket invalid on interval {interval}: ρ(c_lo) = {rho_lo}, ρ(c_hi) = {rho_hi}")]
    SignConditionFailure { interval: usize, rho_lo: f64, rho_hi: f64 },
    #[error("compatibility condition fails (sup residual {})", .0.residual_sup)]
    Incompatible(Box<ObstructionReport>),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

/// Coefficients on one grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub e: f64,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl Coefficients {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, m),
            drift: DVector::zeros(n),
            c: DMatrix::zeros(n, n),
            d: DMatrix::zeros(n, m),
            sigma: DVector::zeros(n),
            e: 0.0,
            q: DMatrix::zeros(n, n),
            s: DMatrix::zeros(m, n),
            r: DMatrix::zeros(m, m),
        }
    }

    /// Scalar problem, arguments in the order `A, B, b, C, D, σ, E, Q, S, R`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(a: f64, b: f64, drift: f64, c: f64, d: f64, sigma: f64, e: f64, q: f64, s: f64, r: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self {
            a: m(a),
            b: m(b),
            drift: DVector::from_element(1, drift),
            c: m(c),
            d: m(d),
            sigma: DVector::from_element(1, sigma),
            e,
            q: m(q),
            s: m(s),
            r: m(r),
        }
    }

    fn check(&self, n: usize, m: usize, at: &str) -> Result<(), ModelError> {
        let shapes = [
            ("A", self.a.shape(), (n, n)),
            ("B", self.b.shape(), (n, m)),
            ("b", self.drift.shape(), (n, 1)),
            ("C", self.c.shape(), (n, n)),
            ("D", self.d.shape(), (n, m)),
            ("sigma", self.sigma.shape(), (n, 1)),
            ("Q", self.q.shape(), (n, n)),
            ("S", self.s.shape(), (m, n)),
            ("R", self.r.shape(), (m, m)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(ModelError::invalid(
                    format!("problem.{name}"),
                    format!("shape {got:?} at {at}, expected {want:?}"),
                ));
            }
        }
        for (name, mat) in [("Q", &self.q), ("R", &self.r)] {
            if !is_symmetric(mat) {
                return Err(ModelError::invalid(format!("problem.{name}"), format!("not symmetric at {at}")));
            }
        }
        let all = [&self.a, &self.b, &self.c, &self.d, &self.q, &self.s, &self.r];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite()))
            || self.drift.iter().chain(self.sigma.iter()).any(|v| !v.is_finite())
            || !self.e.is_finite()
        {
            return Err(ModelError::invalid("problem", format!("non-finite coefficient at {at}")));
        }
        Ok(())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= 1e-12 * scale
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Coefficients are piecewise constant on the grid intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    n: usize,
    m: usize,
    grid: TimeGrid,
    coefs: Vec<Coefficients>,
    l: DMatrix<f64>,
    x0: DVector<f64>,
    gen: ConvexGenerator,
}

impl LqProblem {
    /// Assumption checks on `L`, `R` and `Q − SᵀR⁻¹S` are left to [`crate::mp::sufficiency_check`]
    /// and the solvers, so that degenerate inputs can still be inspected.
    pub fn new(
        grid: TimeGrid,
        gen: ConvexGenerator,
        coefs: Vec<Coefficients>,
        l: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let n = x0.len();
        let m = coefs.first().map_or(0, |c| c.b.ncols());
        if n == 0 || m == 0 {
            return Err(ModelError::invalid("problem", "state and control dimensions must be positive"));
        }
        if coefs.len() != grid.steps() {
            return Err(ModelError::invalid(
                "problem",
                format!("{} coefficient sets for {} intervals", coefs.len(), grid.steps()),
            ));
        }
        for (k, c) in coefs.iter().enumerate() {
            c.check(n, m, &format!("interval {k}"))?;
        }
        if l.shape() != (n, n) || !is_symmetric(&l) {
            return Err(ModelError::invalid("problem.L", format!("must be a symmetric {n}x{n} matrix")));
        }
        Ok(Self { n, m, grid, coefs, l, x0, gen })
    }

    pub fn constant(
        grid: TimeGrid,
        gen: ConvexGenerator,
        coefs: Coefficients,
        l: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self, ModelError> {
        Self::new(grid, gen, vec![coefs; grid.steps()], l, x0)
    }

    /// Coefficients sampled at the left end of each interval.
    pub fn from_fn(
        grid: TimeGrid,
        gen: ConvexGenerator,
        f: impl Fn(f64) -> Coefficients,
        l: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self, ModelError> {
        Self::new(grid, gen, (0..grid.steps()).map(|k| f(grid.time(k))).collect(), l, x0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gen(&self) -> &ConvexGenerator {
        &self.gen
    }

    pub fn coefs(&self, k: usize) -> &Coefficients {
        &self.coefs[k.min(self.coefs.len() - 1)]
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn with_x0(&self, x0: DVector<f64>) -> Self {
        Self { x0, ..self.clone() }
    }

    /// `δ = min_k λ_min(R_k)`.
    pub fn delta(&self) -> f64 {
        self.coefs.iter().map(|c| min_eigenvalue(&c.r)).fold(f64::INFINITY, f64::min)
    }

    /// `max_k ‖C_k‖_F`.
    pub fn c_norm(&self) -> f64 {
        self.coefs.iter().map(|c| c.c.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqSolverConfig {
    /// RK4 steps per grid interval.
    pub substeps: usize,
    pub blowup_bound: f64,
    pub damping: f64,
    pub max_iterations: usize,
    pub tol: f64,
    /// Allowed gap between the fixed points started from `c_lo` and `c_hi`.
    pub start_agreement: f64,
    /// Compatibility tolerance is `residual_tol·(1 + max‖C‖)`.
    pub residual_tol: f64,
}

impl Default for LqSolverConfig {
    fn default() -> Self {
        Self {
            substeps: 1,
            blowup_bound: 1e8,
            damping: 0.5,
            max_iterations: 500,
            tol: 1e-8,
            start_agreement: 1e-6,
            residual_tol: 1e-6,
        }
    }
}

/// Gain blocks at one time: `M = R + γDᵀPD`, its inverse, `K̃ = BᵀP + S + γDᵀPC`.
struct Gains {
    m_inv: DMatrix<f64>,
    kt: DMatrix<f64>,
}

fn gain_blocks(c: &Coefficients, p: &DMatrix<f64>, gamma: f64, delta: f64, t: f64) -> Result<Gains, LqError> {
    let dtp = c.d.transpose() * p;
    let m = &c.r + gamma * &dtp * &c.d;
    let min_eig = min_eigenvalue(&m);
    if !(min_eig >= 0.5 * delta) || delta <= 0.0 {
        return Err(LqError::GainSingularity { t, min_eig });
    }
    let m_inv = if m.nrows() == 1 {
        DMatrix::from_element(1, 1, 1.0 / m[(0, 0)])
    } else {
        m.cholesky().ok_or(LqError::GainSingularity { t, min_eig })?.inverse()
    };
    let kt = c.b.transpose() * p + &c.s + gamma * dtp * &c.c;
    Ok(Gains { m_inv, kt })
}

/// `dP/dτ` in backward time `τ = T − t`.
fn riccati_rhs(c: &Coefficients, p: &DMatrix<f64>, gamma: f64, delta: f64, t: f64) -> Result<DMatrix<f64>, LqError> {
    let g = gain_blocks(c, p, gamma, delta, t)?;
    Ok(p * &c.a + c.a.transpose() * p + c.e * p + gamma * c.c.transpose() * p * &c.c + &c.q
        - g.kt.transpose() * &g.m_inv * &g.kt)
}

/// `dφ/dτ`.
fn phi_rhs(
    c: &Coefficients,
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: f64,
    delta: f64,
    t: f64,
) -> Result<DMatrix<f64>, LqError> {
    let g = gain_blocks(c, p, gamma, delta, t)?;
    let w = g.kt.transpose() * &g.m_inv;
    let psigma = p * col(&c.sigma);
    let drift = &c.a.transpose() * phi + c.e * phi - &w * (c.b.transpose() * phi);
    Ok(drift + gamma * (c.c.transpose() * &psigma - &w * (c.d.transpose() * &psigma)) + p * col(&c.drift))
}

/// `v = Bᵀφ + γDᵀPσ`, `λ = σ − DM⁻¹v`.
fn offset_terms(
    c: &Coefficients,
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: f64,
    delta: f64,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Gains), LqError> {
    let g = gain_blocks(c, p, gamma, delta, t)?;
    let sigma = col(&c.sigma);
    let v = c.b.transpose() * phi + gamma * c.d.transpose() * p * &sigma;
    let lambda = sigma - &c.d * (&g.m_inv * &v);
    Ok((v, lambda, g))
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn quad_form(p: &DMatrix<f64>, lambda: &DMatrix<f64>) -> f64 {
    (lambda.transpose() * p * lambda)[(0, 0)]
}

/// `dl/dτ`.
#[allow(clippy::too_many_arguments)]
fn l_rhs(
    c: &Coefficients,
    gen: &ConvexGenerator,
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    l: f64,
    gamma: f64,
    delta: f64,
    t: f64,
) -> Result<f64, LqError> {
    let (v, lambda, g) = offset_terms(c, p, phi, gamma, delta, t)?;
    let bphi = c.b.transpose() * phi;
    let mv = &g.m_inv * &v;
    let phib = (phi.transpose() * col(&c.drift))[(0, 0)];
    Ok(c.e * l + phib - (mv.transpose() * &bphi)[(0, 0)]
        + gen.eval(quad_form(p, &lambda))
        + 0.5 * (mv.transpose() * &c.r * &mv)[(0, 0)])
}

/// `P` on the grid, with Hermite dense output between substeps.
pub type RiccatiPath = DensePath;

pub fn solve_riccati(prob: &LqProblem, gamma: &[f64], cfg: &LqSolverConfig) -> Result<RiccatiPath, LqError> {
    check_gamma(prob, gamma)?;
    let delta = prob.delta();
    ode::integrate_backward(
        &prob.grid,
        cfg.substeps,
        prob.l.clone(),
        true,
        cfg.blowup_bound,
        |k, _, _, t, p| riccati_rhs(prob.coefs(k), p, gamma[k], delta, t),
    )
}

pub fn solve_phi(prob: &LqProblem, p: &RiccatiPath, gamma: &[f64], cfg: &LqSolverConfig) -> Result<DensePath, LqError> {
    check_gamma(prob, gamma)?;
    let delta = prob.delta();
    ode::integrate_backward(
        &prob.grid,
        cfg.substeps,
        DMatrix::zeros(prob.n, 1),
        false,
        cfg.blowup_bound,
        |k, i, theta, t, phi| phi_rhs(prob.coefs(k), &p.at_fine(i, theta), phi, gamma[k], delta, t),
    )
}

pub fn solve_l(
    prob: &LqProblem,
    p: &RiccatiPath,
    phi: &DensePath,
    gamma: &[f64],
    cfg: &LqSolverConfig,
) -> Result<DensePath, LqError> {
    check_gamma(prob, gamma)?;
    let delta = prob.delta();
    ode::integrate_backward(
        &prob.grid,
        cfg.substeps,
        DMatrix::zeros(1, 1),
        false,
        cfg.blowup_bound,
        |k, i, theta, t, l| {
            let v = l_rhs(prob.coefs(k), &prob.gen, &p.at_fine(i, theta), &phi.at_fine(i, theta), l[(0, 0)], gamma[k], delta, t)?;
            Ok(DMatrix::from_element(1, 1, v))
        },
    )
}

fn check_gamma(prob: &LqProblem, gamma: &[f64]) -> Result<(), LqError> {
    if gamma.len() != prob.grid.steps() {
        return Err(ModelError::invalid("gamma", format!("expected {} values, got {}", prob.grid.steps(), gamma.len())).into());
    }
    Ok(())
}

/// Compatibility diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstructionReport {
    /// Residual `‖C − DM⁻¹(BᵀP + S + γDᵀPC)‖_F` per grid node.
    pub residual: Vec<f64>,
    pub residual_sup: f64,
    pub tolerance: f64,
    pub violating: Vec<usize>,
    /// `sup_a |G̃(2a) − 2G̃(a)|` on a sample grid; zero for positively homogeneous generators.
    pub homogeneity_gap: f64,
}

impl ObstructionReport {
    pub fn compatible(&self) -> bool {
        self.violating.is_empty()
    }
}

pub fn check_compatibility(prob: &LqProblem, p: &RiccatiPath, gamma: &[f64], cfg: &LqSolverConfig) -> Result<ObstructionReport, LqError> {
    check_gamma(prob, gamma)?;
    let delta = prob.delta();
    let n_steps = prob.grid.steps();
    let residual = (0..=n_steps)
        .map(|node| {
            let k = node.min(n_steps - 1);
            let c = prob.coefs(k);
            let g = gain_blocks(c, &p.node(node), gamma[k], delta, prob.grid.time(node))?;
            Ok((&c.c - &c.d * (&g.m_inv * &g.kt)).norm())
        })
        .collect::<Result<Vec<f64>, LqError>>()?;
    let tolerance = cfg.residual_tol * (1.0 + prob.c_norm());
    let violating = residual.iter().enumerate().filter(|(_, r)| **r > tolerance).map(|(i, _)| i).collect();
    let residual_sup = residual.iter().copied().fold(0.0, f64::max);
    let samples: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.25).collect();
    Ok(ObstructionReport { residual, residual_sup, tolerance, violating, homogeneity_gap: prob.gen.homogeneity_gap(&samples) })
}

/// `q_k = ⟨Pλ, λ⟩` at the midpoint of each interval.
fn midpoint_q(prob: &LqProblem, p: &RiccatiPath, phi: &DensePath, k: usize, g: f64) -> Result<f64, LqError> {
    let t = prob.grid.time(k) + 0.5 * prob.grid.dt();
    let (pm, phim) = (p.at_time(t), phi.at_time(t));
    let (_, lambda, _) = offset_terms(prob.coefs(k), &pm, &phim, g, prob.delta(), t)?;
    Ok(quad_form(&pm, &lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointRun {
    pub start: f64,
    pub iterations: usize,
    pub gamma: Vec<f64>,
    /// `sup_k |γ_k − c*(q_k)|` at termination.
    pub residual: f64,
}

/// Damped iteration `γ ← (1−ω)γ + ω·c*(⟨Pλ,λ⟩)` from a constant start.
pub fn iterate_gamma(prob: &LqProblem, start: f64, cfg: &LqSolverConfig) -> Result<FixedPointRun, LqError> {
    let mut gamma = vec![start; prob.grid.steps()];
    let mut step = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let p = solve_riccati(prob, &gamma, cfg)?;
        let phi = solve_phi(prob, &p, &gamma, cfg)?;
        step = 0.0;
        let mut residual = 0.0f64;
        let mut next = gamma.clone();
        for k in 0..gamma.len() {
            let target = prob.gen.maximizer(midpoint_q(prob, &p, &phi, k, gamma[k])?);
            residual = residual.max((target - gamma[k]).abs());
            next[k] = (1.0 - cfg.damping) * gamma[k] + cfg.damping * target;
            step = step.max((next[k] - gamma[k]).abs());
        }
        if residual == 0.0 || step < cfg.tol {
            let residual = if residual == 0.0 { 0.0 } else { residual };
            return Ok(FixedPointRun { start, iterations: it, gamma: if residual == 0.0 { gamma } else { next }, residual });
        }
        gamma = next;
    }
    Err(LqError::NoFixedPoint { iterations: cfg.max_iterations, step })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMethod {
    FixedPoint,
    Bisection,
}

/// Per-interval sign check `ρ(c_hi) ≤ 0 ≤ ρ(c_lo)` for `ρ(γ) = c*(q(γ)) − γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignCheck {
    pub rho_lo: f64,
    pub rho_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqSolution {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub method: GammaMethod,
    /// One value per interval.
    pub gamma: Vec<f64>,
    pub p: RiccatiPath,
    pub phi: DensePath,
    pub l: DensePath,
    /// Feedback gain `K` and offset `k` per node: `u* = K x + k`.
    pub gain: Vec<DMatrix<f64>>,
    pub offset: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub compatibility: ObstructionReport,
    pub runs: Vec<FixedPointRun>,
    pub sign_checks: Vec<SignCheck>,
    pub iterations: usize,
    pub j_analytic: f64,
}

/// Per-node gains from solved paths.
#[allow(clippy::type_complexity)]
fn node_gains(
    prob: &LqProblem,
    p: &RiccatiPath,
    phi: &DensePath,
    gamma: &[f64],
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>), LqError> {
    let n_steps = prob.grid.steps();
    let delta = prob.delta();
    let mut gains = Vec::with_capacity(n_steps + 1);
    let mut offsets = Vec::with_capacity(n_steps + 1);
    let mut lambdas = Vec::with_capacity(n_steps + 1);
    for node in 0..=n_steps {
        let k = node.min(n_steps - 1);
        let c = prob.coefs(k);
        let (v, lambda, g) = offset_terms(c, &p.node(node), &phi.node(node), gamma[k], delta, prob.grid.time(node))?;
        gains.push(-(&g.m_inv * &g.kt));
        offsets.push(DVector::from_column_slice((-(&g.m_inv * v)).as_slice()));
        lambdas.push(DVector::from_column_slice(lambda.as_slice()));
    }
    Ok((gains, offsets, lambdas))
}

fn paths_close(a: &DensePath, b: &DensePath) -> bool {
    let scale = 1.0 + a.sup_norm().max(b.sup_norm());
    a.max_diff(b) <= 1e-10 * scale
}

/// Solve the fixed point for `γ`, then `P`, `φ`, `l`, the feedback and the value.
pub fn solve_gamma(prob: &LqProblem, cfg: &LqSolverConfig) -> Result<LqSolution, LqError> {
    let theta = *prob.gen.theta();
    let runs = [theta.lo(), theta.hi()].map(|s| iterate_gamma(prob, s, cfg));
    let runs: Vec<FixedPointRun> = match runs {
        [Ok(a), Ok(b)] => vec![a, b],
        [Err(e), _] | [_, Err(e)] => {
            // an incompatible problem is reported as such even if the iteration fails
            let gamma = vec![prob.gen.penalty_minimizer(); prob.grid.steps()];
            if let Ok(p) = solve_riccati(prob, &gamma, cfg) {
                if let Ok(report) = check_compatibility(prob, &p, &gamma, cfg) {
                    if !report.compatible() {
                        return Err(LqError::Incompatible(Box::new(report)));
                    }
                }
            }
            return Err(e);
        }
    };
    let gap = runs[0].gamma.iter().zip(&runs[1].gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut gamma = runs[0].gamma.clone();
    let mut method = GammaMethod::FixedPoint;
    let mut iterations = runs[0].iterations.max(runs[1].iterations);
    let mut sign_checks = Vec::new();

    let p_lo = solve_riccati(prob, &vec![theta.lo(); gamma.len()], cfg)?;
    let p_hi = solve_riccati(prob, &vec![theta.hi(); gamma.len()], cfg)?;
    let independent = prob.n == 1 && prob.m == 1 && paths_close(&p_lo, &p_hi) && {
        let phi_lo = solve_phi(prob, &p_lo, &vec![theta.lo(); gamma.len()], cfg)?;
        let phi_hi = solve_phi(prob, &p_hi, &vec![theta.hi(); gamma.len()], cfg)?;
        paths_close(&phi_lo, &phi_hi)
    };
    let compat_lo = check_compatibility(prob, &p_lo, &vec![theta.lo(); gamma.len()], cfg)?;
    if independent && compat_lo.compatible() {
        let phi = solve_phi(prob, &p_lo, &vec![theta.lo(); gamma.len()], cfg)?;
        let rho = |k: usize, g: f64| -> Result<f64, LqError> {
            Ok(prob.gen.maximizer(midpoint_q(prob, &p_lo, &phi, k, g)?) - g)
        };
        let mut roots = Vec::with_capacity(gamma.len());
        let mut steps = 0;
        for k in 0..gamma.len() {
            let check = SignCheck { rho_lo: rho(k, theta.lo())?, rho_hi: rho(k, theta.hi())? };
            sign_checks.push(check);
            if !(check.rho_hi <= 0.0 && check.rho_lo >= 0.0) {
                return Err(LqError::SignConditionFailure { interval: k, rho_lo: check.rho_lo, rho_hi: check.rho_hi });
            }
            let (mut a, mut b) = (theta.lo(), theta.hi());
            if check.rho_lo == 0.0 {
                b = a;
            } else if check.rho_hi == 0.0 {
                a = b;
            }
            let mut it = 0;
            while b - a > 1e-13 * (1.0 + b.abs()) && it < 200 {
                let mid = 0.5 * (a + b);
                if rho(k, mid)? > 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
                it += 1;
            }
            steps = steps.max(it);
            roots.push(0.5 * (a + b));
        }
        gamma = roots;
        method = GammaMethod::Bisection;
        iterations = steps;
    } else if gap > cfg.start_agreement {
        return Err(LqError::NonUniqueFixedPoint { gap });
    }

    let p = solve_riccati(prob, &gamma, cfg)?;
    let compatibility = check_compatibility(prob, &p, &gamma, cfg)?;
    if !compatibility.compatible() {
        return Err(LqError::Incompatible(Box::new(compatibility)));
    }
    if method == GammaMethod::Bisection && gap > cfg.start_agreement {
        return Err(LqError::NonUniqueFixedPoint { gap });
    }
    let phi = solve_phi(prob, &p, &gamma, cfg)?;
    let l = solve_l(prob, &p, &phi, &gamma, cfg)?;
    let (gain, offset, lambda) = node_gains(prob, &p, &phi, &gamma)?;
    let x0 = col(&prob.x0);
    let j_analytic = 0.5 * quad_form(&p.node(0), &x0) + (phi.node(0).transpose() * &x0)[(0, 0)] + l.node(0)[(0, 0)];
    Ok(LqSolution {
        grid: prob.grid,
        n: prob.n,
        m: prob.m,
        method,
        gamma,
        p,
        phi,
        l,
        gain,
        offset,
        lambda,
        compatibility,
        runs,
        sign_checks,
        iterations,
        j_analytic,
    })
}

/// Affine feedback `u*(t_k, x) = K_k x + k_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub grid: TimeGrid,
    pub gain: Vec<DMatrix<f64>>,
    pub offset: Vec<DVector<f64>>,
}

impl Feedback {
    /// Control at grid node `k`.
    pub fn at(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gain[k] * x + &self.offset[k]
    }

    /// Control at time `t`, using the node at or before `t`.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let k = ((t / self.grid.dt()) + 1e-9).floor().clamp(0.0, self.grid.steps() as f64) as usize;
        self.at(k, x)
    }
}

pub fn synthesize_control(sol: &LqSolution) -> Feedback {
    Feedback { grid: sol.grid, gain: sol.gain.clone(), offset: sol.offset.clone() }
}

/// `½x₀ᵀP(0)x₀ + φ(0)ᵀx₀ + l(0)`.
pub fn analytic_value(sol: &LqSolution, x0: &DVector<f64>) -> f64 {
    let x = col(x0);
    0.5 * quad_form(&sol.p.node(0), &x) + (sol.phi.node(0).transpose() * &x)[(0, 0)] + sol.l.node(0)[(0, 0)]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqSummary {
    #[serde(rename = "J_analytic")]
    pub j_analytic: f64,
    pub compatibility_residual: f64,
    pub iterations: usize,
    pub method: GammaMethod,
    pub start_gap: f64,
}

impl LqSolution {
    pub fn summary(&self) -> LqSummary {
        let start_gap = match self.runs.as_slice() {
            [a, b] => a.gamma.iter().zip(&b.gamma).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
            _ => 0.0,
        };
        LqSummary {
            j_analytic: self.j_analytic,
            compatibility_residual: self.compatibility.residual_sup,
            iterations: self.iterations,
            method: self.method,
            start_gap,
        }
    }

    /// CSV with columns `t, P_ij…, phi_i…, l, gamma, K_ij…, k_i…` (one row per node;
    /// `gamma` at node `k` is the value on `[t_k, t_{k+1})`, the last interval's at `T`).
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let (n, m) = (self.n, self.m);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                header.push(format!("P_{i}{j}"));
            }
        }
        header.extend((0..n).map(|i| format!("phi_{i}")));
        header.push("l".into());
        header.push("gamma".into());
        for i in 0..m {
            for j in 0..n {
                header.push(format!("K_{i}{j}"));
            }
        }
        header.extend((0..m).map(|i| format!("k_{i}")));
        w.write_record(&header)?;
        let steps = self.grid.steps();
        for node in 0..=steps {
            let mut row = vec![self.grid.time(node).to_string()];
            let p = self.p.node(node);
            for i in 0..n {
                for j in 0..n {
                    row.push(p[(i, j)].to_string());
                }
            }
            row.extend(self.phi.node(node).iter().map(|v| v.to_string()));
            row.push(self.l.node(node)[(0, 0)].to_string());
            row.push(self.gamma[node.min(steps - 1)].to_string());
            let k = &self.gain[node];
            for i in 0..m {
                for j in 0..n {
                    row.push(k[(i, j)].to_string());
                }
            }
            row.extend(self.offset[node].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
