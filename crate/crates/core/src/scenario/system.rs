//! Controlled state dynamics and linear drivers, evaluated one path at a time.

use serde::Serialize;

use super::bank::PathEnsemble;
use super::ScenarioError;
use crate::gcore::DeterministicScenario;

/// Closed-loop state equation `dX = b dt + h d⟨B⟩ + σ dB` with the control folded in.
pub trait ControlledSde: Sync {
    fn dim(&self) -> usize;
    fn initial_state(&self, x: &mut [f64]);
    /// Coefficients at grid step `k` and state `x`.
    fn coefficients(&self, k: usize, x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]);

    /// Euler step for a chunk of paths stored component-major (`x[i * lanes + lane]`),
    /// with Brownian increments `dw`.
    fn step_chunk(&self, k: usize, dt: f64, gamma: f64, x: &mut [f64], dw: &[f64]) {
        let lanes = dw.len();
        let n = self.dim();
        let mut xl = vec![0.0; n];
        let (mut b, mut h, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for lane in 0..lanes {
            for i in 0..n {
                xl[i] = x[i * lanes + lane];
            }
            self.coefficients(k, &xl, &mut b, &mut h, &mut s);
            for i in 0..n {
                x[i * lanes + lane] += (b[i] + h[i] * gamma) * dt + s[i] * dw[lane];
            }
        }
    }
}

/// Driver `f = E(s)·y + f₀`, `g = g₀` with terminal value `Φ`.
pub trait LinearDriver: Sync {
    /// Discount rate `E` on step `k`.
    fn discount(&self, k: usize) -> f64;
    /// `(f₀, g₀)` at step `k`.
    fn running(&self, k: usize, x: &[f64]) -> (f64, f64);
    fn terminal(&self, x: &[f64]) -> f64;

    /// `acc += weight·(f₀ + g₀γ)` for a component-major chunk.
    fn accumulate_chunk(&self, k: usize, gamma: f64, weight: f64, x: &[f64], acc: &mut [f64]) {
        let lanes = acc.len();
        let n = x.len() / lanes.max(1);
        let mut xl = vec![0.0; n];
        for lane in 0..lanes {
            for i in 0..n {
                xl[i] = x[i * lanes + lane];
            }
            let (f0, g0) = self.running(k, &xl);
            acc[lane] += weight * (f0 + g0 * gamma);
        }
    }

    /// `acc += weight·Φ(x)` for a component-major chunk.
    fn terminal_chunk(&self, weight: f64, x: &[f64], acc: &mut [f64]) {
        let lanes = acc.len();
        let n = x.len() / lanes.max(1);
        let mut xl = vec![0.0; n];
        for lane in 0..lanes {
            for i in 0..n {
                xl[i] = x[i * lanes + lane];
            }
            acc[lane] += weight * self.terminal(&xl);
        }
    }
}

/// `X = x₀ + B`.
#[derive(Debug, Clone, Copy)]
pub struct Brownian {
    pub x0: f64,
}

impl ControlledSde for Brownian {
    fn dim(&self) -> usize {
        1
    }

    fn initial_state(&self, x: &mut [f64]) {
        x[0] = self.x0;
    }

    fn coefficients(&self, _k: usize, _x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]) {
        (b[0], h[0], sigma[0]) = (0.0, 0.0, 1.0);
    }

    fn step_chunk(&self, _k: usize, _dt: f64, _gamma: f64, x: &mut [f64], dw: &[f64]) {
        for (x, w) in x.iter_mut().zip(dw) {
            *x += w;
        }
    }
}

/// Discount weights `Λ_k = exp(Σ_{i<k} E_i Δt)` for `k = 0..=N`.
pub fn discount_weights<D: LinearDriver + ?Sized>(driver: &D, steps: usize, dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    out.push(1.0);
    for k in 0..steps {
        acc += driver.discount(k) * dt;
        out.push(acc.exp());
    }
    out
}

type CoefFn = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// State equation from closures of `(t, x, out)`.
pub struct FnSde {
    dim: usize,
    x0: Vec<f64>,
    dt: f64,
    drift: CoefFn,
    bracket: CoefFn,
    vol: CoefFn,
}

impl FnSde {
    pub fn new(
        x0: Vec<f64>,
        dt: f64,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        bracket: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        vol: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { dim: x0.len(), x0, dt, drift: Box::new(drift), bracket: Box::new(bracket), vol: Box::new(vol) }
    }
}

impl ControlledSde for FnSde {
    fn dim(&self) -> usize {
        self.dim
    }

    fn initial_state(&self, x: &mut [f64]) {
        x.copy_from_slice(&self.x0);
    }

    fn coefficients(&self, k: usize, x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]) {
        let t = k as f64 * self.dt;
        (self.drift)(t, x, b);
        (self.bracket)(t, x, h);
        (self.vol)(t, x, sigma);
    }
}

type RunFn = Box<dyn Fn(f64, &[f64]) -> (f64, f64) + Send + Sync>;
type TermFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Driver from per-step discount rates and closures.
pub struct FnDriver {
    discount: Vec<f64>,
    dt: f64,
    running: Option<RunFn>,
    terminal: TermFn,
}

impl FnDriver {
    pub fn new(
        discount: Vec<f64>,
        dt: f64,
        running: impl Fn(f64, &[f64]) -> (f64, f64) + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { discount, dt, running: Some(Box::new(running)), terminal: Box::new(terminal) }
    }

    /// Terminal payoff only, no discounting.
    pub fn terminal_only(steps: usize, dt: f64, phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { discount: vec![0.0; steps], dt, running: None, terminal: Box::new(phi) }
    }
}

impl LinearDriver for FnDriver {
    fn discount(&self, k: usize) -> f64 {
        self.discount[k]
    }

    fn running(&self, k: usize, x: &[f64]) -> (f64, f64) {
        self.running.as_ref().map_or((0.0, 0.0), |f| f(k as f64 * self.dt, x))
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    fn accumulate_chunk(&self, k: usize, gamma: f64, weight: f64, x: &[f64], acc: &mut [f64]) {
        let Some(f) = &self.running else { return };
        let lanes = acc.len();
        let n = x.len() / lanes.max(1);
        let t = k as f64 * self.dt;
        let mut xl = vec![0.0; n];
        for lane in 0..lanes {
            for i in 0..n {
                xl[i] = x[i * lanes + lane];
            }
            let (f0, g0) = f(t, &xl);
            acc[lane] += weight * (f0 + g0 * gamma);
        }
    }
}

/// State values `X_{t_k}` for every path, `values[(p * (N+1) + k) * dim + i]`.
#[derive(Debug, Clone, Serialize)]
pub struct StatePaths {
    pub dim: usize,
    pub n_paths: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

impl StatePaths {
    pub fn at(&self, p: usize, k: usize) -> &[f64] {
        let off = (p * (self.steps + 1) + k) * self.dim;
        &self.values[off..off + self.dim]
    }

    pub fn terminal(&self, p: usize) -> &[f64] {
        self.at(p, self.steps)
    }
}

/// Euler–Maruyama: `X_{k+1} = X_k + b Δt + h γ_k Δt + σ ΔB_k`.
pub fn simulate_state<S: ControlledSde + ?Sized>(
    sde: &S,
    scn: &DeterministicScenario,
    ens: &PathEnsemble,
) -> Result<StatePaths, ScenarioError> {
    if scn.grid() != &ens.grid {
        return Err(ScenarioError::GridMismatch);
    }
    let n = sde.dim();
    let steps = ens.steps();
    let dt = ens.grid.dt();
    let gamma = scn.gamma();
    let mut values = vec![0.0; ens.n_paths * (steps + 1) * n];
    let mut b = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut s = vec![0.0; n];
    for p in 0..ens.n_paths {
        let row = &mut values[p * (steps + 1) * n..(p + 1) * (steps + 1) * n];
        sde.initial_state(&mut row[..n]);
        let incs = ens.path(p);
        for k in 0..steps {
            let (done, rest) = row.split_at_mut((k + 1) * n);
            let x = &done[k * n..];
            sde.coefficients(k, x, &mut b, &mut h, &mut s);
            for i in 0..n {
                let next = x[i] + b[i] * dt + h[i] * gamma[k] * dt + s[i] * incs[k];
                if !next.is_finite() {
                    return Err(ScenarioError::NonFiniteState { path: p, step: k + 1 });
                }
                rest[i] = next;
            }
        }
    }
    Ok(StatePaths { dim: n, n_paths: ens.n_paths, steps, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcore::{TimeGrid, VolatilityInterval};
    use crate::scenario::bank::simulate_b;

    fn setup(n: usize) -> (DeterministicScenario, PathEnsemble) {
        let th = VolatilityInterval::new(1.0, 4.0).unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let scn = DeterministicScenario::constant(grid, 1.0, &th).unwrap();
        let ens = simulate_b(&scn, n, 5);
        (scn, ens)
    }

    #[test]
    fn frozen_and_drift_only() {
        let (scn, ens) = setup(8);
        let zero = FnSde::new(vec![2.0], 0.02, |_, _, b| b[0] = 0.0, |_, _, h| h[0] = 0.0, |_, _, s| s[0] = 0.0);
        let paths = simulate_state(&zero, &scn, &ens).unwrap();
        assert!(paths.values.iter().all(|&v| v == 2.0));
        let drift = FnSde::new(vec![2.0], 0.02, |_, _, b| b[0] = 1.0, |_, _, h| h[0] = 0.0, |_, _, s| s[0] = 0.0);
        let paths = simulate_state(&drift, &scn, &ens).unwrap();
        assert!((paths.terminal(3)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exponential_martingale() {
        let n = 20_000;
        let (scn, ens) = setup(n);
        let sde = FnSde::new(vec![1.0], 0.02, |_, _, b| b[0] = 0.0, |_, _, h| h[0] = 0.0, |_, x, s| s[0] = x[0]);
        let paths = simulate_state(&sde, &scn, &ens).unwrap();
        let ends: Vec<f64> = (0..n).map(|p| paths.terminal(p)[0]).collect();
        let mean = ends.iter().sum::<f64>() / n as f64;
        let sd = (ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn divergence_is_reported() {
        let (scn, ens) = setup(2);
        let sde = FnSde::new(vec![1.0], 0.02, |_, x, b| b[0] = 1e300 * x[0], |_, _, h| h[0] = 0.0, |_, _, s| s[0] = 0.0);
        assert!(matches!(simulate_state(&sde, &scn, &ens), Err(ScenarioError::NonFiniteState { .. })));
    }

    #[test]
    fn discount_weights_integrate_rate() {
        let d = FnDriver::new(vec![0.5; 4], 0.25, |_, _| (0.0, 0.0), |_| 0.0);
        let w = discount_weights(&d, 4, 0.25);
        assert_eq!(w[0], 1.0);
        assert!((w[4] - 0.5f64.exp()).abs() < 1e-15);
    }
}
