//! Maximum-principle diagnostics for the LQ problem: Hamiltonian, adjoint pair,
//! stationarity residual, sufficiency conditions and the variational slope of the cost.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcore::{ConvexGenerator, DeterministicScenario};
use crate::lq::{min_eigenvalue, synthesize_control, ClosedLoop, Coefficients, Feedback, LqProblem, LqSolution, ShadowPair};
use crate::scenario::{
    eval_cost_functional_with, scenario_value, simulate_b, simulate_state, ControlledSde, LinearDriver, MonteCarlo,
    NormalBank, OptimizerConfig, ScenarioError, StatePaths,
};

#[derive(Debug, Error)]
pub enum MpError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), MpError> {
    if v.len() != expected {
        return Err(MpError::DimensionMismatch { what, expected, got: v.len() });
    }
    Ok(())
}

fn interval(prob: &LqProblem, t: f64) -> usize {
    let grid = prob.grid();
    ((t / grid.dt()).floor().max(0.0) as usize).min(grid.steps() - 1)
}

/// `H = pᵀ(Ax + Bv + b) + γ qᵀ(Cx + Dv + σ) + Ey + ½[xᵀQx + 2⟨Sx, v⟩ + vᵀRv]`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    prob: &LqProblem,
    t: f64,
    x: &[f64],
    y: f64,
    v: &[f64],
    p: &[f64],
    q: &[f64],
    gamma: f64,
) -> Result<f64, MpError> {
    let (n, m) = (prob.n(), prob.m());
    check_len("x", x, n)?;
    check_len("v", v, m)?;
    check_len("p", p, n)?;
    check_len("q", q, n)?;
    let c = prob.coefs(interval(prob, t));
    let mut h = c.e * y;
    for i in 0..n {
        let mut drift = c.drift[i];
        let mut vol = c.sigma[i];
        for j in 0..n {
            drift += c.a[(i, j)] * x[j];
            vol += c.c[(i, j)] * x[j];
            h += 0.5 * x[i] * c.q[(i, j)] * x[j];
        }
        for j in 0..m {
            drift += c.b[(i, j)] * v[j];
            vol += c.d[(i, j)] * v[j];
        }
        h += p[i] * drift + gamma * q[i] * vol;
    }
    for i in 0..m {
        let sx: f64 = (0..n).map(|j| c.s[(i, j)] * x[j]).sum();
        h += sx * v[i];
        for j in 0..m {
            h += 0.5 * v[i] * c.r[(i, j)] * v[j];
        }
    }
    Ok(h)
}

/// `H_v = Bᵀp + γDᵀq + Sx + Rv`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_v(
    prob: &LqProblem,
    t: f64,
    x: &[f64],
    v: &[f64],
    p: &[f64],
    q: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, MpError> {
    let (n, m) = (prob.n(), prob.m());
    check_len("x", x, n)?;
    check_len("v", v, m)?;
    check_len("p", p, n)?;
    check_len("q", q, n)?;
    let mut out = vec![0.0; m];
    grad_v(prob.coefs(interval(prob, t)), x, v, p, q, gamma, &mut out);
    Ok(out)
}

fn grad_v(c: &Coefficients, x: &[f64], v: &[f64], p: &[f64], q: &[f64], gamma: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut g = 0.0;
        for j in 0..x.len() {
            g += c.b[(j, i)] * p[j] + gamma * c.d[(j, i)] * q[j] + c.s[(i, j)] * x[j];
        }
        for j in 0..v.len() {
            g += c.r[(i, j)] * v[j];
        }
        *o = g;
    }
}

/// Adjoint pair along state paths, laid out like [`StatePaths`].
#[derive(Debug, Clone, Serialize)]
pub struct AdjointPath {
    pub dim: usize,
    pub n_paths: usize,
    pub steps: usize,
    /// `p = P X* + φ`.
    pub p: Vec<f64>,
    /// `q = P (C X* + D u* + σ)`.
    pub q: Vec<f64>,
}

impl AdjointPath {
    pub fn p_at(&self, path: usize, k: usize) -> &[f64] {
        let off = (path * (self.steps + 1) + k) * self.dim;
        &self.p[off..off + self.dim]
    }

    pub fn q_at(&self, path: usize, k: usize) -> &[f64] {
        let off = (path * (self.steps + 1) + k) * self.dim;
        &self.q[off..off + self.dim]
    }
}

/// Node data used along paths: `P`, `φ` and the optimal feedback.
struct NodeData {
    p: Vec<DMatrix<f64>>,
    phi: Vec<DVector<f64>>,
    fb: Feedback,
}

impl NodeData {
    fn new(sol: &LqSolution) -> Self {
        let steps = sol.grid.steps();
        Self {
            p: (0..=steps).map(|k| sol.p.node(k)).collect(),
            phi: (0..=steps).map(|k| DVector::from_column_slice(sol.phi.node(k).as_slice())).collect(),
            fb: synthesize_control(sol),
        }
    }

    /// Writes `u*`, `p`, `q` at node `k` for state `x`.
    fn adjoint(&self, c: &Coefficients, k: usize, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let u = self.fb.at(k, x);
        let p = &self.p[k] * x + &self.phi[k];
        let q = &self.p[k] * (&c.c * x + &c.d * &u + &c.sigma);
        (u, p, q)
    }
}

pub fn adjoint_lq(prob: &LqProblem, sol: &LqSolution, paths: &StatePaths) -> AdjointPath {
    let data = NodeData::new(sol);
    let steps = paths.steps;
    let n = paths.dim;
    let mut p = Vec::with_capacity(paths.values.len());
    let mut q = Vec::with_capacity(paths.values.len());
    for path in 0..paths.n_paths {
        for k in 0..=steps {
            let x = DVector::from_column_slice(paths.at(path, k));
            let (_, pk, qk) = data.adjoint(prob.coefs(k), k, &x);
            p.extend(pk.iter());
            q.extend(qk.iter());
        }
    }
    AdjointPath { dim: n, n_paths: paths.n_paths, steps, p, q }
}

/// Admissible control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlDomain {
    AllSpace,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ControlDomain {
    fn vertices(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
        let m = lo.len();
        (0..1usize << m).map(|mask| (0..m).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    /// `sup ‖H_v‖` over paths and nodes.
    pub residual_unconstrained: f64,
    /// `sup max(0, −min_vertex H_v·(v − u))` for box domains.
    pub residual_constrained: Option<f64>,
    /// `1 + max ‖X*‖²`.
    pub scale: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Stationarity of the Hamiltonian along optimal paths simulated under the solution's `γ`.
///
/// The candidate control is `u* + offset` (clipped to the box for box domains); the adjoint
/// pair is the one of the optimal control.
pub fn mp_residual(
    prob: &LqProblem,
    sol: &LqSolution,
    domain: &ControlDomain,
    offset: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<ResidualReport, MpError> {
    let m = prob.m();
    check_len("offset", offset, m)?;
    if let ControlDomain::Box { lo, hi } = domain {
        check_len("domain.lo", lo, m)?;
        check_len("domain.hi", hi, m)?;
    }
    let data = NodeData::new(sol);
    let grid = *prob.grid();
    let scn = expand(sol, prob.gen())?;
    let ens = simulate_b(&scn, n_paths, seed);
    let sys = ClosedLoop::new(prob, &data.fb);
    let paths = simulate_state(&sys, &scn, &ens)?;
    let vertices = match domain {
        ControlDomain::Box { lo, hi } => ControlDomain::vertices(lo, hi),
        ControlDomain::AllSpace => Vec::new(),
    };
    let mut unconstrained = 0.0f64;
    let mut constrained = 0.0f64;
    let mut max_sq = 0.0f64;
    let mut hv = vec![0.0; m];
    for path in 0..n_paths {
        for k in 0..=grid.steps() {
            let c = prob.coefs(k);
            let gamma = sol.gamma[k.min(grid.steps() - 1)];
            let x = DVector::from_column_slice(paths.at(path, k));
            max_sq = max_sq.max(x.norm_squared());
            let (u_star, p, q) = data.adjoint(c, k, &x);
            let mut u: Vec<f64> = u_star.iter().zip(offset).map(|(a, b)| a + b).collect();
            if let ControlDomain::Box { lo, hi } = domain {
                for i in 0..m {
                    u[i] = u[i].clamp(lo[i], hi[i]);
                }
            }
            grad_v(c, x.as_slice(), &u, p.as_slice(), q.as_slice(), gamma, &mut hv);
            unconstrained = unconstrained.max(hv.iter().map(|g| g * g).sum::<f64>().sqrt());
            if !vertices.is_empty() {
                let worst = vertices
                    .iter()
                    .map(|v| (0..m).map(|i| hv[i] * (v[i] - u[i])).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                constrained = constrained.max(-worst);
            }
        }
    }
    Ok(ResidualReport {
        residual_unconstrained: unconstrained,
        residual_constrained: (!vertices.is_empty()).then_some(constrained),
        scale: 1.0 + max_sq,
        n_paths,
        seed,
    })
}

fn expand(sol: &LqSolution, gen: &ConvexGenerator) -> Result<DeterministicScenario, MpError> {
    DeterministicScenario::new(sol.grid, sol.gamma.clone(), gen.theta()).map_err(|e| MpError::Scenario(e.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub pass: bool,
    /// Smallest eigenvalue over all nodes.
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SufficiencyReport {
    /// `L ⪰ 0`.
    pub terminal_convex: ConditionCheck,
    /// `R ⪰ δI` for some `δ > 0`.
    pub control_coercive: ConditionCheck,
    /// `[[Q, Sᵀ], [S, R]] ⪰ 0` at every node.
    pub joint_convex: ConditionCheck,
    /// The discount enters linearly in `y`, so `H` is affine there.
    pub discount_linear: bool,
}

impl SufficiencyReport {
    pub fn all_pass(&self) -> bool {
        self.terminal_convex.pass && self.control_coercive.pass && self.joint_convex.pass && self.discount_linear
    }
}

const PSD_TOL: f64 = 1e-10;

pub fn sufficiency_check(prob: &LqProblem) -> SufficiencyReport {
    let (n, m) = (prob.n(), prob.m());
    let l_eig = min_eigenvalue(prob.terminal());
    let mut r_eig = f64::INFINITY;
    let mut joint_eig = f64::INFINITY;
    for k in 0..prob.grid().steps() {
        let c = prob.coefs(k);
        r_eig = r_eig.min(min_eigenvalue(&c.r));
        let mut block = DMatrix::zeros(n + m, n + m);
        block.view_mut((0, 0), (n, n)).copy_from(&c.q);
        block.view_mut((n, 0), (m, n)).copy_from(&c.s);
        block.view_mut((0, n), (n, m)).copy_from(&c.s.transpose());
        block.view_mut((n, n), (m, m)).copy_from(&c.r);
        joint_eig = joint_eig.min(min_eigenvalue(&block));
    }
    SufficiencyReport {
        terminal_convex: ConditionCheck { pass: l_eig >= -PSD_TOL, min_eigenvalue: l_eig },
        control_coercive: ConditionCheck { pass: r_eig > PSD_TOL, min_eigenvalue: r_eig },
        joint_convex: ConditionCheck { pass: joint_eig >= -PSD_TOL, min_eigenvalue: joint_eig },
        discount_linear: true,
    }
}

/// `(X*, X̂)`: the optimal state and the variational state for the open-loop direction
/// `Δ = u − u*`; the driver integrates the first-order cost change `L^u`.
struct Variational<'a> {
    prob: &'a LqProblem,
    fb: &'a Feedback,
    shift: DVector<f64>,
}

impl Variational<'_> {
    fn split(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let n = self.prob.n();
        (DVector::from_column_slice(&x[..n]), DVector::from_column_slice(&x[n..]))
    }
}

impl ControlledSde for Variational<'_> {
    fn dim(&self) -> usize {
        2 * self.prob.n()
    }

    fn initial_state(&self, x: &mut [f64]) {
        let n = self.prob.n();
        x[..n].copy_from_slice(self.prob.x0().as_slice());
        x[n..].fill(0.0);
    }

    fn coefficients(&self, k: usize, x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]) {
        let n = self.prob.n();
        let c = self.prob.coefs(k);
        let (xs, xh) = self.split(x);
        let u = self.fb.at(k, &xs);
        let bs = &c.a * &xs + &c.b * &u + &c.drift;
        let ss = &c.c * &xs + &c.d * &u + &c.sigma;
        let bh = &c.a * &xh + &c.b * &self.shift;
        let sh = &c.c * &xh + &c.d * &self.shift;
        b[..n].copy_from_slice(bs.as_slice());
        b[n..].copy_from_slice(bh.as_slice());
        sigma[..n].copy_from_slice(ss.as_slice());
        sigma[n..].copy_from_slice(sh.as_slice());
        h.fill(0.0);
    }

    fn step_chunk(&self, k: usize, dt: f64, gamma: f64, x: &mut [f64], dw: &[f64]) {
        let lanes = dw.len();
        if self.prob.n() != 1 || self.prob.m() != 1 {
            let dim = self.dim();
            let (mut xl, mut b, mut h, mut s) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
            for lane in 0..lanes {
                for i in 0..dim {
                    xl[i] = x[i * lanes + lane];
                }
                self.coefficients(k, &xl, &mut b, &mut h, &mut s);
                for i in 0..dim {
                    x[i * lanes + lane] += (b[i] + h[i] * gamma) * dt + s[i] * dw[lane];
                }
            }
            return;
        }
        let c = self.prob.coefs(k);
        let (a, bb, drift, cc, d, sig) = (c.a[(0, 0)], c.b[(0, 0)], c.drift[0], c.c[(0, 0)], c.d[(0, 0)], c.sigma[0]);
        let (gk, ok, du) = (self.fb.gain[k][(0, 0)], self.fb.offset[k][0], self.shift[0]);
        let (xs, xh) = x.split_at_mut(lanes);
        for ((xs, xh), w) in xs.iter_mut().zip(xh.iter_mut()).zip(dw) {
            let u = gk * *xs + ok;
            let (s0, h0) = (*xs, *xh);
            *xs += (a * s0 + bb * u + drift) * dt + (cc * s0 + d * u + sig) * w;
            *xh += (a * h0 + bb * du) * dt + (cc * h0 + d * du) * w;
        }
    }
}

impl LinearDriver for Variational<'_> {
    fn discount(&self, k: usize) -> f64 {
        self.prob.coefs(k).e
    }

    /// `(Qx* + Sᵀu*)ᵀX̂ + (Sx* + Ru*)ᵀΔ`.
    fn running(&self, k: usize, x: &[f64]) -> (f64, f64) {
        let c = self.prob.coefs(k);
        let (xs, xh) = self.split(x);
        let u = self.fb.at(k, &xs);
        let fx = &c.q * &xs + c.s.transpose() * &u;
        let fv = &c.s * &xs + &c.r * &u;
        (fx.dot(&xh) + fv.dot(&self.shift), 0.0)
    }

    /// `(L x*_T)ᵀ X̂_T`.
    fn terminal(&self, x: &[f64]) -> f64 {
        let (xs, xh) = self.split(x);
        (self.prob.terminal() * xs).dot(&xh)
    }

    fn accumulate_chunk(&self, k: usize, _gamma: f64, weight: f64, x: &[f64], acc: &mut [f64]) {
        let lanes = acc.len();
        if self.prob.n() != 1 || self.prob.m() != 1 {
            let dim = self.dim();
            let mut xl = vec![0.0; dim];
            for lane in 0..lanes {
                for i in 0..dim {
                    xl[i] = x[i * lanes + lane];
                }
                acc[lane] += weight * self.running(k, &xl).0;
            }
            return;
        }
        let c = self.prob.coefs(k);
        let (q, s, r) = (c.q[(0, 0)], c.s[(0, 0)], c.r[(0, 0)]);
        let (gk, ok, du) = (self.fb.gain[k][(0, 0)], self.fb.offset[k][0], self.shift[0]);
        let (xs, xh) = x.split_at(lanes);
        for ((a, xs), xh) in acc.iter_mut().zip(xs).zip(xh) {
            let u = gk * xs + ok;
            *a += weight * ((q * xs + s * u) * xh + (s * xs + r * u) * du);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeRow {
    pub eps: f64,
    pub slope: f64,
    pub expected: f64,
    pub gap: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeTable {
    pub rows: Vec<SlopeRow>,
    pub base_value: f64,
    pub base_stderr: f64,
    /// `E_{P*}[L^u]` and its standard error.
    pub expected: f64,
    pub expected_stderr: f64,
    /// Argmax scenario block values at `u*`.
    pub argmax_gamma: Vec<f64>,
    /// Number of distinct optimizer end points within `1e-6·(1 + |sup|)` of the sup.
    pub argmax_multiplicity: usize,
}

impl SlopeTable {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Finite-difference slopes `(J(u*+εΔ) − J(u*))/ε` against `E_{P*}[L^u]` for the open-loop
/// direction `Δ = shift`, all on one bank of normal draws.
pub fn variational_slope(
    prob: &LqProblem,
    sol: &LqSolution,
    shift: &[f64],
    eps: &[f64],
    mc: MonteCarlo,
    cfg: &OptimizerConfig,
) -> Result<SlopeTable, MpError> {
    check_len("shift", shift, prob.m())?;
    let fb = synthesize_control(sol);
    let shift = DVector::from_column_slice(shift);
    let grid = *prob.grid();
    let bank = NormalBank::new(mc.n_paths, grid.steps(), mc.seed);
    let base_sys = ShadowPair::new(prob, &fb, 0.0, shift.clone());
    let base = eval_cost_functional_with(&base_sys, &base_sys, prob.gen(), grid, &bank, mc, cfg)?;
    let best = base.value;
    let band = 1e-6 * (1.0 + best.abs());
    let argmax_multiplicity =
        base.trace.starts.iter().filter(|s| s.merged_into.is_none() && s.value >= best - band).count().max(1);

    let var = Variational { prob, fb: &fb, shift: shift.clone() };
    let flat = ConvexGenerator::sublinear(*prob.gen().theta());
    let (expected, expected_stderr) = scenario_value(&var, &var, &flat, &base.scenario(), &bank)?;

    let mut rows = Vec::with_capacity(eps.len());
    for &e in eps {
        let sys = ShadowPair::new(prob, &fb, e, shift.clone());
        let j = eval_cost_functional_with(&sys, &sys, prob.gen(), grid, &bank, mc, cfg)?;
        let slope = (j.value - base.value) / e;
        rows.push(SlopeRow { eps: e, slope, expected, gap: (slope - expected).abs(), stderr: expected_stderr });
    }
    Ok(SlopeTable {
        rows,
        base_value: base.value,
        base_stderr: base.stderr,
        expected,
        expected_stderr,
        argmax_gamma: base.gamma.clone(),
        argmax_multiplicity,
    })
}

/// Combined maximum-principle report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpReport {
    pub residual: ResidualReport,
    pub sufficiency: SufficiencyReport,
    pub slopes: Option<SlopeTable>,
}

impl MpReport {
    pub fn write_json<W: Write>(&self, out: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(out, self)
    }
}

#[cfg(test)]
mod tests;
