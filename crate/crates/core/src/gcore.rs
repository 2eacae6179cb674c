//! Generators, penalties, time grids and deterministic volatility scenarios.
//!
//! A convex generator is held in envelope form
//!
//! ```text
//! G̃(a) = sup_{c ∈ [c_lo, c_hi]} ( ½·c·a − ℓ(c) )
//! ```
//!
//! where `ℓ` is a convex penalty vanishing somewhere on the interval. The
//! sublinear generator `G(a) = ½(c_hi·a⁺ − c_lo·a⁻)` is the `ℓ ≡ 0` member
//! of the family and dominates every other one.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Relative slack allowed when checking discrete convexity of tabulated penalties.
const CONVEXITY_SLACK: f64 = 1e-12;

/// Interval `[c_lo, c_hi]` of admissible variance rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityInterval {
    c_lo: f64,
    c_hi: f64,
}

impl VolatilityInterval {
    pub fn new(c_lo: f64, c_hi: f64) -> Result<Self, ModelError> {
        if !(c_lo.is_finite() && c_lo > 0.0) {
            return Err(ModelError::invalid("theta.c_lo", format!("must be finite and > 0, got {c_lo}")));
        }
        if !(c_hi.is_finite() && c_hi >= c_lo) {
            return Err(ModelError::invalid("theta.c_hi", format!("must be finite and >= c_lo ({c_lo}), got {c_hi}")));
        }
        Ok(Self { c_lo, c_hi })
    }

    pub fn lo(&self) -> f64 {
        self.c_lo
    }

    pub fn hi(&self) -> f64 {
        self.c_hi
    }

    pub fn width(&self) -> f64 {
        self.c_hi - self.c_lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.c_lo + self.c_hi)
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.c_lo && c <= self.c_hi
    }

    pub fn clamp(&self, c: f64) -> f64 {
        c.clamp(self.c_lo, self.c_hi)
    }

    /// The dominating sublinear generator `G(a) = ½(c_hi·a⁺ − c_lo·a⁻)`.
    pub fn sublinear(&self, a: f64) -> f64 {
        if a >= 0.0 {
            0.5 * self.c_hi * a
        } else {
            0.5 * self.c_lo * a
        }
    }
}

/// Convex penalty on the variance rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// `ℓ ≡ 0`: the sublinear (G-expectation) case.
    Zero,
    /// `ℓ(c) = κ·(c − c₀)²`.
    Quadratic { curvature: f64, anchor: f64 },
    /// Piecewise-linear interpolation of `(knots, values)`.
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
}

impl Penalty {
    /// Penalty value at `c`. Tabulated penalties are extended linearly outside their knots.
    pub fn at(&self, c: f64) -> f64 {
        match self {
            Penalty::Zero => 0.0,
            Penalty::Quadratic { curvature, anchor } => {
                let d = c - anchor;
                curvature * d * d
            }
            Penalty::Tabulated { knots, values } => interpolate_linear(knots, values, c),
        }
    }

    fn validate(&self, theta: &VolatilityInterval) -> Result<(), ModelError> {
        match self {
            Penalty::Zero => Ok(()),
            Penalty::Quadratic { curvature, anchor } => {
                if !(curvature.is_finite() && *curvature >= 0.0) {
                    return Err(ModelError::invalid("penalty.curvature", format!("must be finite and >= 0, got {curvature}")));
                }
                if !theta.contains(*anchor) {
                    return Err(ModelError::invalid(
                        "penalty.anchor",
                        format!("must lie in [{}, {}], got {anchor}", theta.lo(), theta.hi()),
                    ));
                }
                Ok(())
            }
            Penalty::Tabulated { knots, values } => {
                if knots.len() < 2 || knots.len() != values.len() {
                    return Err(ModelError::invalid(
                        "penalty.knots",
                        format!("need at least two knots with matching values ({} knots, {} values)", knots.len(), values.len()),
                    ));
                }
                if knots.iter().chain(values.iter()).any(|v| !v.is_finite()) {
                    return Err(ModelError::invalid("penalty.values", "knots and values must be finite"));
                }
                if knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(ModelError::invalid("penalty.knots", "knots must be strictly increasing"));
                }
                if knots[0] > theta.lo() || knots[knots.len() - 1] < theta.hi() {
                    return Err(ModelError::invalid("penalty.knots", "knots must cover the volatility interval"));
                }
                if values.iter().any(|v| *v < 0.0) {
                    return Err(ModelError::invalid("penalty.values", "penalty values must be nonnegative"));
                }
                let slopes: Vec<f64> = knots
                    .windows(2)
                    .zip(values.windows(2))
                    .map(|(k, v)| (v[1] - v[0]) / (k[1] - k[0]))
                    .collect();
                for w in slopes.windows(2) {
                    let scale = 1.0 + w[0].abs().max(w[1].abs());
                    if w[1] < w[0] - CONVEXITY_SLACK * scale {
                        return Err(ModelError::invalid("penalty.values", "tabulated penalty is not convex"));
                    }
                }
                let min = breakpoints(theta, self)
                    .into_iter()
                    .map(|c| self.at(c))
                    .fold(f64::INFINITY, f64::min);
                if min != 0.0 {
                    return Err(ModelError::invalid(
                        "penalty.values",
                        format!("penalty must vanish somewhere on the volatility interval (minimum is {min})"),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// The pair (volatility interval, penalty) defining `G̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexGenerator {
    theta: VolatilityInterval,
    penalty: Penalty,
}

impl ConvexGenerator {
    pub fn new(theta: VolatilityInterval, penalty: Penalty) -> Result<Self, ModelError> {
        penalty.validate(&theta)?;
        Ok(Self { theta, penalty })
    }

    /// The sublinear generator on `theta` (zero penalty).
    pub fn sublinear(theta: VolatilityInterval) -> Self {
        Self { theta, penalty: Penalty::Zero }
    }

    pub fn theta(&self) -> &VolatilityInterval {
        &self.theta
    }

    pub fn penalty(&self) -> &Penalty {
        &self.penalty
    }

    /// The dominating sublinear generator on the same interval.
    pub fn dominating(&self) -> ConvexGenerator {
        Self::sublinear(self.theta)
    }

    /// `true` when `G̃` is continuously differentiable (strictly convex penalty).
    pub fn is_differentiable(&self) -> bool {
        matches!(self.penalty, Penalty::Quadratic { curvature, .. } if curvature > 0.0)
            || self.theta.width() == 0.0
    }

    /// `G̃(a)`.
    #[inline]
    pub fn eval(&self, a: f64) -> f64 {
        let c = self.maximizer(a);
        0.5 * c * a - self.penalty.at(c)
    }

    /// Smallest maximizer of `c ↦ ½ca − ℓ(c)` on the interval; equals `2G̃′(a)`
    /// wherever `G̃` is differentiable.
    #[inline]
    pub fn maximizer(&self, a: f64) -> f64 {
        let theta = &self.theta;
        match &self.penalty {
            Penalty::Quadratic { curvature, anchor } if *curvature > 0.0 => {
                theta.clamp(anchor + a / (4.0 * curvature))
            }
            Penalty::Zero | Penalty::Quadratic { .. } => {
                if a > 0.0 {
                    theta.hi()
                } else {
                    theta.lo()
                }
            }
            Penalty::Tabulated { .. } => {
                // ½ca − ℓ(c) is piecewise linear and concave: the maximum sits on a breakpoint.
                let mut best_c = theta.lo();
                let mut best = f64::NEG_INFINITY;
                for c in breakpoints(theta, &self.penalty) {
                    let v = 0.5 * c * a - self.penalty.at(c);
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                best_c
            }
        }
    }

    /// `G(a) = ½(c_hi·a⁺ − c_lo·a⁻)`.
    pub fn dominating_g(&self, a: f64) -> f64 {
        self.theta.sublinear(a)
    }

    /// Smallest minimizer of the penalty on the interval.
    pub fn penalty_minimizer(&self) -> f64 {
        match &self.penalty {
            Penalty::Zero => self.theta.lo(),
            Penalty::Quadratic { anchor, .. } => *anchor,
            Penalty::Tabulated { .. } => self.maximizer(0.0),
        }
    }

    /// `sup_a |G̃(2a) − 2G̃(a)|` over `samples`; zero for positively homogeneous generators.
    pub fn homogeneity_gap(&self, samples: &[f64]) -> f64 {
        samples
            .iter()
            .map(|&a| (self.eval(2.0 * a) - 2.0 * self.eval(a)).abs())
            .fold(0.0, f64::max)
    }
}

/// Candidate maximizers for piecewise-linear penalties: interval ends plus interior knots.
fn breakpoints(theta: &VolatilityInterval, penalty: &Penalty) -> Vec<f64> {
    let mut out = vec![theta.lo()];
    if let Penalty::Tabulated { knots, .. } = penalty {
        out.extend(knots.iter().copied().filter(|&k| k > theta.lo() && k < theta.hi()));
    }
    if theta.hi() > theta.lo() {
        out.push(theta.hi());
    }
    out
}

fn interpolate_linear(knots: &[f64], values: &[f64], x: f64) -> f64 {
    let n = knots.len();
    let i = match knots.partition_point(|&k| k <= x) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let w = (x - knots[i]) / (knots[i + 1] - knots[i]);
    values[i] + w * (values[i + 1] - values[i])
}

/// Uniform grid `t_k = k·T/N` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::invalid("grid.T", format!("horizon must be finite and > 0, got {horizon}")));
        }
        if steps == 0 {
            return Err(ModelError::invalid("grid.N", "step count must be >= 1"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.time(k))
    }

    /// Index `k` with `t_k = t`, if `t` is a node (relative tolerance 1e-9).
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        ((x - k).abs() <= 1e-9 * (1.0 + x.abs()) && k >= 0.0 && k as usize <= self.steps).then_some(k as usize)
    }

    /// Grid with `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> TimeGrid {
        TimeGrid { horizon: self.horizon, steps: self.steps * factor.max(1) }
    }
}

/// Piecewise-constant variance-rate path: `γ_k` on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicScenario {
    grid: TimeGrid,
    gamma: Vec<f64>,
}

impl DeterministicScenario {
    pub fn new(grid: TimeGrid, gamma: Vec<f64>, theta: &VolatilityInterval) -> Result<Self, ModelError> {
        if gamma.len() != grid.steps() {
            return Err(ModelError::invalid(
                "scenario.gamma",
                format!("expected {} values, got {}", grid.steps(), gamma.len()),
            ));
        }
        if let Some((k, g)) = gamma.iter().enumerate().find(|(_, g)| !theta.contains(**g)) {
            return Err(ModelError::invalid(
                "scenario.gamma",
                format!("entry {k} = {g} outside [{}, {}]", theta.lo(), theta.hi()),
            ));
        }
        Ok(Self { grid, gamma })
    }

    /// Caller guarantees the length and membership invariants.
    pub(crate) fn from_parts(grid: TimeGrid, gamma: Vec<f64>) -> Self {
        debug_assert_eq!(gamma.len(), grid.steps());
        Self { grid, gamma }
    }

    pub fn constant(grid: TimeGrid, c: f64, theta: &VolatilityInterval) -> Result<Self, ModelError> {
        Self::new(grid, vec![c; grid.steps()], theta)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Same path on a grid refined by `factor` (each value repeated).
    pub fn refine(&self, factor: usize) -> DeterministicScenario {
        let factor = factor.max(1);
        DeterministicScenario {
            grid: self.grid.refine(factor),
            gamma: self.gamma.iter().flat_map(|&g| std::iter::repeat(g).take(factor)).collect(),
        }
    }

    /// Quadratic variation `⟨B⟩_T = Σ γ_k Δt`.
    pub fn bracket_total(&self) -> f64 {
        self.gamma.iter().sum::<f64>() * self.grid.dt()
    }

    /// CSV with columns `t, gamma` (one row per interval, `t` its left end).
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "gamma"])?;
        for (k, g) in self.gamma.iter().enumerate() {
            w.write_record([self.grid.time(k).to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scenario penalty `α(P_γ) = Σ_k ℓ(γ_k)·Δt`.
pub fn penalty_cost(scn: &DeterministicScenario, gen: &ConvexGenerator) -> f64 {
    let dt = scn.grid().dt();
    scn.gamma().iter().map(|&g| gen.penalty().at(g) * dt).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta() -> VolatilityInterval {
        VolatilityInterval::new(1.0, 4.0).unwrap()
    }

    fn quad() -> ConvexGenerator {
        ConvexGenerator::new(theta(), Penalty::Quadratic { curvature: 1.0, anchor: 2.0 }).unwrap()
    }

    // Brute-force envelope over a fine c-grid.
    fn envelope_scan(gen: &ConvexGenerator, a: f64) -> (f64, f64) {
        let th = gen.theta();
        let n = 300_000;
        (0..=n)
            .map(|i| th.lo() + th.width() * i as f64 / n as f64)
            .map(|c| (0.5 * c * a - gen.penalty().at(c), c))
            .fold((f64::NEG_INFINITY, 0.0), |best, cur| if cur.0 > best.0 { cur } else { best })
    }

    #[test]
    fn gtilde_examples() {
        let zero = ConvexGenerator::sublinear(theta());
        assert_eq!(zero.eval(2.0), 4.0);
        assert_eq!(zero.eval(0.0), 0.0);
        assert_eq!(quad().eval(0.0), 0.0);
        let (scan, c) = envelope_scan(&quad(), 2.0);
        assert!((scan - 2.25).abs() < 1e-9 && (c - 2.5).abs() < 1e-4);
        assert!((quad().eval(2.0) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn maximizer_examples() {
        let zero = ConvexGenerator::sublinear(theta());
        assert_eq!(zero.maximizer(1.0), 4.0);
        assert_eq!(zero.maximizer(-1.0), 1.0);
        assert_eq!(zero.maximizer(0.0), 1.0);
        assert!((quad().maximizer(2.0) - 2.5).abs() < 1e-15);
        assert_eq!(quad().maximizer(-100.0), 1.0);
        assert_eq!(quad().maximizer(100.0), 4.0);
    }

    #[test]
    fn dominating_examples() {
        let g = quad();
        assert_eq!(g.dominating_g(2.0), 4.0);
        assert_eq!(g.dominating_g(-2.0), -1.0);
        assert_eq!(g.dominating_g(0.0), 0.0);
    }

    #[test]
    fn tabulated_matches_scan() {
        let gen = ConvexGenerator::new(
            theta(),
            Penalty::Tabulated { knots: vec![0.5, 1.5, 2.5, 3.0, 4.5], values: vec![2.0, 0.5, 0.0, 0.25, 1.5] },
        )
        .unwrap();
        assert_eq!(gen.eval(0.0), 0.0);
        for a in [-3.0, -0.7, 0.0, 0.4, 1.3, 2.0, 5.0] {
            let (scan, _) = envelope_scan(&gen, a);
            assert!((gen.eval(a) - scan).abs() < 1e-4, "a={a}: {} vs {scan}", gen.eval(a));
            assert!(gen.theta().contains(gen.maximizer(a)));
        }
    }

    #[test]
    fn tabulated_ties_pick_smallest() {
        // flat zero between 2 and 3: maximizer of -ℓ is the smallest zero
        let gen = ConvexGenerator::new(
            theta(),
            Penalty::Tabulated { knots: vec![1.0, 2.0, 3.0, 4.0], values: vec![1.0, 0.0, 0.0, 1.0] },
        )
        .unwrap();
        assert_eq!(gen.maximizer(0.0), 2.0);
        assert_eq!(gen.penalty_minimizer(), 2.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(VolatilityInterval::new(0.0, 1.0).unwrap_err().to_string().contains("theta.c_lo"));
        assert!(VolatilityInterval::new(2.0, 1.0).is_err());
        assert!(ConvexGenerator::new(theta(), Penalty::Quadratic { curvature: 1.0, anchor: 5.0 }).is_err());
        assert!(ConvexGenerator::new(theta(), Penalty::Quadratic { curvature: -1.0, anchor: 2.0 }).is_err());
        // not convex
        assert!(ConvexGenerator::new(
            theta(),
            Penalty::Tabulated { knots: vec![1.0, 2.0, 4.0], values: vec![0.0, 1.0, 1.2] }
        )
        .is_err());
        // no zero on theta
        assert!(ConvexGenerator::new(
            theta(),
            Penalty::Tabulated { knots: vec![1.0, 4.0], values: vec![0.5, 1.0] }
        )
        .is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let grid = TimeGrid::new(1.0, 2).unwrap();
        assert!(DeterministicScenario::new(grid, vec![1.0, 5.0], &theta()).is_err());
    }

    #[test]
    fn penalty_cost_examples() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let zero = ConvexGenerator::sublinear(theta());
        let s = DeterministicScenario::new(grid, (0..10).map(|k| 1.0 + 0.3 * k as f64).collect(), &theta()).unwrap();
        assert_eq!(penalty_cost(&s, &zero), 0.0);
        let at_min = DeterministicScenario::constant(grid, 2.0, &theta()).unwrap();
        assert_eq!(penalty_cost(&at_min, &quad()), 0.0);
        let off = DeterministicScenario::constant(grid, 3.0, &theta()).unwrap();
        assert!((penalty_cost(&off, &quad()) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn penalty_is_time_additive() {
        // α over [0,T] splits into α over [0,t] plus α over [t,T]
        let th = theta();
        let gamma: Vec<f64> = (0..12).map(|k| 1.0 + 0.25 * k as f64).collect();
        let full = DeterministicScenario::new(TimeGrid::new(1.2, 12).unwrap(), gamma.clone(), &th).unwrap();
        let head = DeterministicScenario::new(TimeGrid::new(0.5, 5).unwrap(), gamma[..5].to_vec(), &th).unwrap();
        let tail = DeterministicScenario::new(TimeGrid::new(0.7, 7).unwrap(), gamma[5..].to_vec(), &th).unwrap();
        let g = quad();
        let split = penalty_cost(&head, &g) + penalty_cost(&tail, &g);
        assert!((penalty_cost(&full, &g) - split).abs() < 1e-14);
    }

    #[test]
    fn homogeneity_gap_separates_cases() {
        let samples: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.25).collect();
        assert_eq!(ConvexGenerator::sublinear(theta()).homogeneity_gap(&samples), 0.0);
        assert!(quad().homogeneity_gap(&samples) > 0.1);
    }

    #[test]
    fn scenario_csv() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let s = DeterministicScenario::new(grid, vec![1.5, 2.0], &theta()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,gamma\n0,1.5\n0.5,2\n");
    }
}
