//! Scenario measures `P_γ`, penalized robust expectations and cost functionals.
//!
//! A scenario is a piecewise-constant variance path `γ`; under `P_γ` the canonical
//! process has independent Gaussian increments and `d⟨B⟩ = γ dt`. Robust values are
//! maximized over scenarios by coordinate ascent on a fixed set of normal draws.

mod bank;
mod engine;
mod optimize;
mod system;

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

pub use bank::{simulate_b, simulate_b_with, NormalBank, PathEnsemble, CHUNK};
pub use engine::CostEngine;
pub use optimize::{brent_max, OptimizerConfig, OptimizerTrace, StartTrace};
pub use system::{discount_weights, simulate_state, Brownian, ControlledSde, FnDriver, FnSde, LinearDriver, StatePaths};

use crate::error::ModelError;
use crate::gcore::{penalty_cost, ConvexGenerator, DeterministicScenario, TimeGrid};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("state is not finite on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("ensemble grid does not match the scenario grid")]
    GridMismatch,
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

/// Monte Carlo settings shared by scenario evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarlo {
    pub n_paths: usize,
    pub seed: u64,
    /// Number of piecewise-constant scenario blocks; must divide the step count.
    pub blocks: usize,
}

/// Result of maximizing a penalized value over scenarios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEvaluation {
    pub value: f64,
    pub stderr: f64,
    /// Argmax scenario, one value per block.
    pub gamma: Vec<f64>,
    pub grid: TimeGrid,
    pub seed: u64,
    pub n_paths: usize,
    /// No start improved on its initial point.
    pub stalled: bool,
    pub trace: OptimizerTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRecord<'a> {
    pub value: f64,
    pub stderr: f64,
    pub gamma: &'a [f64],
    pub seed: u64,
    pub n_paths: usize,
}

impl CostEvaluation {
    pub fn record(&self) -> CostRecord<'_> {
        CostRecord { value: self.value, stderr: self.stderr, gamma: &self.gamma, seed: self.seed, n_paths: self.n_paths }
    }

    pub fn write_json<W: Write>(&self, out: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(out, &self.record())
    }

    /// Argmax scenario expanded onto the simulation grid.
    pub fn scenario(&self) -> DeterministicScenario {
        let per = self.grid.steps() / self.gamma.len();
        let gamma = self.gamma.iter().flat_map(|g| std::iter::repeat_n(*g, per)).collect();
        DeterministicScenario::from_parts(self.grid, gamma)
    }
}

/// `sup_γ E_{P_γ}[Λ_T Φ(X_T) + Σ_k Λ_k (f₀ + g₀ γ_k − ℓ(γ_k)) Δt]` over block scenarios,
/// using the normal draws in `bank`.
pub fn eval_cost_functional_with<S, D>(
    driver: &D,
    sde: &S,
    gen: &ConvexGenerator,
    grid: TimeGrid,
    bank: &NormalBank,
    mc: MonteCarlo,
    cfg: &OptimizerConfig,
) -> Result<CostEvaluation, ScenarioError>
where
    S: ControlledSde + ?Sized,
    D: LinearDriver + ?Sized,
{
    let mut full = CostEngine::new(sde, driver, gen, bank, grid, mc.n_paths, mc.blocks)?;
    let pilot_n = cfg.pilot_paths.filter(|&p| p < mc.n_paths);
    let mut pilot = match pilot_n {
        Some(p) => Some(CostEngine::new(sde, driver, gen, bank, grid, p, mc.blocks)?),
        None => None,
    };
    let out = optimize::maximize(&mut full, pilot.as_mut(), gen.theta(), gen.penalty_minimizer(), cfg, mc.seed)?;
    Ok(CostEvaluation {
        value: out.value,
        stderr: out.stderr,
        gamma: out.gamma,
        grid,
        seed: mc.seed,
        n_paths: mc.n_paths,
        stalled: out.stalled,
        trace: out.trace,
    })
}

pub fn eval_cost_functional<S, D>(
    driver: &D,
    sde: &S,
    gen: &ConvexGenerator,
    grid: TimeGrid,
    mc: MonteCarlo,
    cfg: &OptimizerConfig,
) -> Result<CostEvaluation, ScenarioError>
where
    S: ControlledSde + ?Sized,
    D: LinearDriver + ?Sized,
{
    let bank = NormalBank::new(mc.n_paths, grid.steps(), mc.seed);
    eval_cost_functional_with(driver, sde, gen, grid, &bank, mc, cfg)
}

/// Fewest equal blocks on which `gamma` is piecewise constant.
fn coarsest_blocks(gamma: &[f64]) -> usize {
    let n = gamma.len();
    (1..=n)
        .filter(|b| n % b == 0)
        .find(|b| gamma.chunks(n / b).all(|c| c.iter().all(|g| *g == c[0])))
        .unwrap_or(n)
}

/// Penalized value of one fixed scenario (no optimization), with its standard error.
pub fn scenario_value<S, D>(
    driver: &D,
    sde: &S,
    gen: &ConvexGenerator,
    scn: &DeterministicScenario,
    bank: &NormalBank,
) -> Result<(f64, f64), ScenarioError>
where
    S: ControlledSde + ?Sized,
    D: LinearDriver + ?Sized,
{
    let grid = *scn.grid();
    let blocks = coarsest_blocks(scn.gamma());
    let per = grid.steps() / blocks;
    let gamma: Vec<f64> = scn.gamma().iter().step_by(per).copied().collect();
    let mut engine = CostEngine::new(sde, driver, gen, bank, grid, bank.n_paths(), blocks)?;
    let value = engine.reset(&gamma)?;
    Ok((value, engine.stderr()))
}

/// Payoff of the canonical process.
#[derive(Clone)]
pub enum Payoff {
    /// `φ(B_T)`.
    Terminal(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// `φ(B_{t_1}, …, B_{t_N})` on the simulation grid.
    Path(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Payoff {
    pub fn terminal(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Payoff::Terminal(Arc::new(f))
    }

    pub fn path(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Payoff::Path(Arc::new(f))
    }
}

/// `X^j_t = B_{t ∧ t_j}`, `j = 1..=N`: the whole path as a state.
struct History {
    steps: usize,
}

impl ControlledSde for History {
    fn dim(&self) -> usize {
        self.steps
    }

    fn initial_state(&self, x: &mut [f64]) {
        x.fill(0.0);
    }

    fn coefficients(&self, k: usize, _x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]) {
        b.fill(0.0);
        h.fill(0.0);
        for (j, s) in sigma.iter_mut().enumerate() {
            *s = if k <= j { 1.0 } else { 0.0 };
        }
    }
}

/// `sup_γ (E_{P_γ}[φ] − α(P_γ))` over block scenarios. For payoffs whose optimal
/// scenario is not deterministic this is a lower bound for `Ẽ[φ]`.
pub fn robust_expectation(
    payoff: &Payoff,
    gen: &ConvexGenerator,
    grid: TimeGrid,
    mc: MonteCarlo,
    cfg: &OptimizerConfig,
) -> Result<CostEvaluation, ScenarioError> {
    let steps = grid.steps();
    match payoff {
        Payoff::Terminal(f) => {
            let f = f.clone();
            let sde = Brownian { x0: 0.0 };
            let driver = FnDriver::terminal_only(steps, grid.dt(), move |x| f(x[0]));
            eval_cost_functional(&driver, &sde, gen, grid, mc, cfg)
        }
        Payoff::Path(f) => {
            let f = f.clone();
            let sde = History { steps };
            let driver = FnDriver::terminal_only(steps, grid.dt(), move |x| f(x));
            eval_cost_functional(&driver, &sde, gen, grid, mc, cfg)
        }
    }
}

/// Argmax over constant scenarios of `E_{P_γ}[η⟨B⟩_T − G̃(2η)T] − α(P_γ)` on a
/// `resolution`-spaced grid of Θ; the smallest maximizer wins ties.
pub fn pr11_argmax(eta: f64, gen: &ConvexGenerator, grid: TimeGrid, resolution: f64) -> f64 {
    let theta = gen.theta();
    let count = (theta.width() / resolution).round() as usize;
    let shift = gen.eval(2.0 * eta) * grid.horizon();
    let mut best = (theta.lo(), f64::NEG_INFINITY);
    for i in 0..=count {
        let c = theta.clamp(theta.lo() + i as f64 * resolution);
        let scn = DeterministicScenario::from_parts(grid, vec![c; grid.steps()]);
        let v = eta * scn.bracket_total() - shift - penalty_cost(&scn, gen);
        if v > best.1 {
            best = (c, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcore::{Penalty, VolatilityInterval};

    fn theta() -> VolatilityInterval {
        VolatilityInterval::new(1.0, 4.0).unwrap()
    }

    fn quad() -> ConvexGenerator {
        ConvexGenerator::new(theta(), Penalty::Quadratic { curvature: 1.0, anchor: 2.0 }).unwrap()
    }

    fn small_mc() -> MonteCarlo {
        MonteCarlo { n_paths: 4096, seed: 11, blocks: 4 }
    }

    #[test]
    fn coarsest_block_count() {
        assert_eq!(coarsest_blocks(&[1.0; 12]), 1);
        assert_eq!(coarsest_blocks(&[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]), 2);
        assert_eq!(coarsest_blocks(&[1.0, 1.0, 2.0, 2.0, 2.0, 2.0]), 3);
        assert_eq!(coarsest_blocks(&[1.0, 2.0, 2.0, 2.0, 2.0]), 5);
    }

    #[test]
    fn odd_payoff_is_zero() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let r = robust_expectation(&Payoff::terminal(|x| x), &quad(), grid, small_mc(), &OptimizerConfig::default())
            .unwrap();
        assert!(r.value.abs() < 3.0 * r.stderr + 0.05, "{} ± {}", r.value, r.stderr);
    }

    #[test]
    fn square_payoff_dual_values() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let cfg = OptimizerConfig::default();
        let zero = robust_expectation(&Payoff::terminal(|x| x * x), &ConvexGenerator::sublinear(theta()), grid, small_mc(), &cfg)
            .unwrap();
        assert!((zero.value - 4.0).abs() < 3.0 * zero.stderr + 1e-2, "{}", zero.value);
        assert!(zero.gamma.iter().all(|g| (g - 4.0).abs() < 1e-3), "{:?}", zero.gamma);
        let q = robust_expectation(&Payoff::terminal(|x| x * x), &quad(), grid, small_mc(), &cfg).unwrap();
        assert!((q.value - 2.25).abs() < 3.0 * q.stderr + 1e-2, "{}", q.value);
        assert!(q.gamma.iter().all(|g| (g - 2.5).abs() < 0.2), "{:?}", q.gamma);
        for s in &q.trace.starts {
            assert!(s.value <= q.value);
        }
        let again = robust_expectation(&Payoff::terminal(|x| x * x), &quad(), grid, small_mc(), &cfg).unwrap();
        assert_eq!(q, again);
    }

    #[test]
    fn path_payoff_reduces_to_terminal() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mc = MonteCarlo { n_paths: 512, seed: 2, blocks: 2 };
        let cfg = OptimizerConfig::default();
        let t = robust_expectation(&Payoff::terminal(|x| x * x), &quad(), grid, mc, &cfg).unwrap();
        let p = robust_expectation(&Payoff::path(|b| b[3] * b[3]), &quad(), grid, mc, &cfg).unwrap();
        assert!((t.value - p.value).abs() < 1e-9);
    }

    #[test]
    fn zero_cost_picks_penalty_minimizer() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let sde = Brownian { x0: 0.0 };
        let drv = FnDriver::terminal_only(4, grid.dt(), |_| 0.0);
        let r = eval_cost_functional(&drv, &sde, &quad(), grid, MonteCarlo { n_paths: 64, seed: 1, blocks: 2 }, &OptimizerConfig::default())
            .unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.gamma.iter().all(|g| (g - 2.0).abs() < 1e-4));
    }

    #[test]
    fn pr11_examples() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let g = quad();
        assert!((pr11_argmax(0.0, &g, grid, 1e-3) - 2.0).abs() <= 1e-3);
        assert!((pr11_argmax(-10.0, &g, grid, 1e-3) - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn pr11_agrees_with_generator_maximizer() {
        // grid-scan oracle: argmax of ηc − ℓ(c) over a fine independent grid
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let g = quad();
        for eta in [-10.0, -1.0, 0.0, 0.5, 1.0, 3.0, 10.0] {
            let scan = (0..=30_000)
                .map(|i| 1.0 + 3.0 * i as f64 / 30_000.0)
                .map(|c| (c, eta * c - (c - 2.0) * (c - 2.0)))
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            let got = pr11_argmax(eta, &g, grid, 1e-3);
            assert!((got - scan).abs() <= 1e-3, "eta {eta}: {got} vs {scan}");
            assert!((got - g.maximizer(2.0 * eta)).abs() <= 1e-3);
        }
        assert!((pr11_argmax(1.0, &g, grid, 1e-3) - 2.5).abs() <= 1e-3);
    }

    #[test]
    fn record_keys() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let sde = Brownian { x0: 0.0 };
        let drv = FnDriver::terminal_only(2, grid.dt(), |_| 1.0);
        let r = eval_cost_functional(&drv, &sde, &quad(), grid, MonteCarlo { n_paths: 8, seed: 1, blocks: 1 }, &OptimizerConfig::default())
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(r.record()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, ["gamma", "n_paths", "seed", "stderr", "value"]);
    }
}
