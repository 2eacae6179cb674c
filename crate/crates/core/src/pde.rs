//! Explicit monotone finite differences for `∂_t u − G̃(∂²_x u) = 0`.
//!
//! The value at the origin after time `T` is `Ẽ[φ(B_T)]`. Multi-time payoffs
//! are handled by nesting one backward sweep per increment.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::error::ModelError;
use crate::gcore::{ConvexGenerator, TimeGrid};

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("payoff is not finite at x = {x}")]
    NonFiniteValue { x: f64 },
    #[error("spatial grid needs at least 3 nodes, got {0}")]
    GridTooCoarse(usize),
    #[error("payoff growth of degree {0} exceeds the supported quadratic growth")]
    PayoffGrowth(u32),
    #[error("conditioning time {t} is neither 0 nor an observation time")]
    ObservationTimeMismatch { t: f64 },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

/// Uniform nodes on `[-x_max, x_max]`; odd count so that 0 is a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpatialGrid {
    x_max: f64,
    nodes: usize,
}

impl SpatialGrid {
    pub fn new(x_max: f64, nodes: usize) -> Result<Self, PdeError> {
        if nodes < 3 {
            return Err(PdeError::GridTooCoarse(nodes));
        }
        if nodes % 2 == 0 {
            return Err(ModelError::invalid("grid.M", format!("node count must be odd, got {nodes}")).into());
        }
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(ModelError::invalid("grid.x_max", format!("must be finite and > 0, got {x_max}")).into());
        }
        Ok(Self { x_max, nodes })
    }

    /// Truncation at `6·sqrt(c_hi·T) + padding`.
    pub fn for_horizon(gen: &ConvexGenerator, horizon: f64, nodes: usize, padding: f64) -> Result<Self, PdeError> {
        Self::new(6.0 * (gen.theta().hi() * horizon).sqrt() + padding.max(0.0), nodes)
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.x_max / (self.nodes - 1) as f64
    }

    pub fn center(&self) -> usize {
        (self.nodes - 1) / 2
    }

    pub fn node(&self, j: usize) -> f64 {
        // symmetric about the center so that node(center) is exactly 0
        (j as f64 - self.center() as f64) * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| self.node(j)).collect()
    }

    /// Linear interpolation of nodal `values` at `x`, extended linearly beyond the ends.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let h = self.spacing();
        let s = (x + self.x_max) / h;
        let i = (s.floor().max(0.0) as usize).min(self.nodes - 2);
        let w = s - i as f64;
        values[i] + w * (values[i + 1] - values[i])
    }
}

/// Growth class of a payoff; anything beyond quadratic is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Growth {
    Bounded,
    Polynomial(u32),
}

impl Growth {
    fn check(self) -> Result<Self, PdeError> {
        match self {
            Growth::Polynomial(d) if d > 2 => Err(PdeError::PayoffGrowth(d)),
            g => Ok(g),
        }
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Payoff `φ(B_T)` of the terminal value.
#[derive(Clone)]
pub struct MarkovPayoff {
    f: ScalarFn,
    growth: Growth,
}

impl std::fmt::Debug for MarkovPayoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarkovPayoff").field("growth", &self.growth).finish_non_exhaustive()
    }
}

impl MarkovPayoff {
    pub fn new(growth: Growth, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self, PdeError> {
        Ok(Self { f: Arc::new(f), growth: growth.check()? })
    }

    pub fn constant(c: f64) -> Self {
        Self { f: Arc::new(move |_| c), growth: Growth::Bounded }
    }

    /// `Σ coeffs[i]·x^i`; trailing zero coefficients do not count towards the degree.
    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self, PdeError> {
        let degree = coeffs.iter().rposition(|c| *c != 0.0).unwrap_or(0) as u32;
        let growth = if degree == 0 { Growth::Bounded } else { Growth::Polynomial(degree) };
        Self::new(growth, move |x| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c))
    }

    pub fn identity() -> Self {
        Self { f: Arc::new(|x| x), growth: Growth::Polynomial(1) }
    }

    pub fn square() -> Self {
        Self { f: Arc::new(|x| x * x), growth: Growth::Polynomial(2) }
    }

    /// `(x − K)⁺`.
    pub fn call(strike: f64) -> Self {
        Self { f: Arc::new(move |x| (x - strike).max(0.0)), growth: Growth::Polynomial(1) }
    }

    /// Logistic step `1 / (1 + exp(−(x − K)/w))`.
    pub fn smoothed_indicator(strike: f64, width: f64) -> Self {
        Self { f: Arc::new(move |x| 1.0 / (1.0 + (-(x - strike) / width).exp())), growth: Growth::Bounded }
    }

    /// Linear interpolation of a value slice (e.g. a conditional expectation table).
    pub fn from_slice(slice: &ValueFunctionSlice) -> Self {
        let grid = slice.grid;
        let values = slice.values.clone();
        Self { f: Arc::new(move |x| grid.interpolate(&values, x)), growth: Growth::Polynomial(1) }
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    /// `self − other`, growth of the larger of the two.
    pub fn minus(&self, other: &MarkovPayoff) -> MarkovPayoff {
        let (a, b) = (self.f.clone(), other.f.clone());
        let growth = match (self.growth, other.growth) {
            (Growth::Bounded, g) | (g, Growth::Bounded) => g,
            (Growth::Polynomial(p), Growth::Polynomial(q)) => Growth::Polynomial(p.max(q)),
        };
        MarkovPayoff { f: Arc::new(move |x| a(x) - b(x)), growth }
    }

    fn sample(&self, grid: &SpatialGrid) -> Result<Vec<f64>, PdeError> {
        (0..grid.len())
            .map(|j| {
                let x = grid.node(j);
                let v = self.eval(x);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(PdeError::NonFiniteValue { x })
                }
            })
            .collect()
    }
}

/// Nodal values `u(s, x_j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueFunctionSlice {
    pub grid: SpatialGrid,
    pub time: f64,
    pub values: Vec<f64>,
}

impl ValueFunctionSlice {
    pub fn value_at_origin(&self) -> f64 {
        self.values[self.grid.center()]
    }

    pub fn at(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    /// CSV with columns `x, u`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "u"])?;
        for (j, u) in self.values.iter().enumerate() {
            w.write_record([self.grid.node(j).to_string(), u.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of explicit sub-steps per grid step so that `Δt ≤ h²/(2·c_hi)`.
pub fn cfl_substeps(gen: &ConvexGenerator, grid: &SpatialGrid, dt: f64) -> usize {
    let h = grid.spacing();
    let limit = h * h / (2.0 * gen.theta().hi());
    ((dt / limit) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Evolve nodal values forward in PDE time by `duration`, using `steps` grid steps
/// each split by the CFL sub-stepping factor. End nodes carry zero curvature.
fn evolve(gen: &ConvexGenerator, grid: &SpatialGrid, values: &mut Vec<f64>, duration: f64, steps: usize) {
    if duration <= 0.0 {
        return;
    }
    let coarse = duration / steps.max(1) as f64;
    let sub = cfl_substeps(gen, grid, coarse);
    let dt = coarse / sub as f64;
    let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
    let m = values.len();
    let mut next = values.clone();
    for _ in 0..steps.max(1) * sub {
        for j in 1..m - 1 {
            let curvature = (values[j + 1] - 2.0 * values[j] + values[j - 1]) * inv_h2;
            next[j] = values[j] + dt * gen.eval(curvature);
        }
        // boundary: linear continuation, so G̃(0) = 0 leaves the ends fixed
        next[0] = values[0];
        next[m - 1] = values[m - 1];
        std::mem::swap(values, &mut next);
    }
}

fn steps_for(tgrid: &TimeGrid, duration: f64) -> usize {
    (duration / tgrid.dt()).round().max(1.0) as usize
}

/// Solve the generator PDE up to `tgrid.horizon()` from initial data `payoff`.
/// The returned slice's value at the origin is `Ẽ[φ(B_T)]`.
pub fn solve_generator_pde(
    gen: &ConvexGenerator,
    payoff: &MarkovPayoff,
    sgrid: &SpatialGrid,
    tgrid: &TimeGrid,
) -> Result<ValueFunctionSlice, PdeError> {
    payoff.growth.check()?;
    let mut values = payoff.sample(sgrid)?;
    evolve(gen, sgrid, &mut values, tgrid.horizon(), tgrid.steps());
    Ok(ValueFunctionSlice { grid: *sgrid, time: tgrid.horizon(), values })
}

/// Payoff `φ(B_{t₁}, B_{t₂} − B_{t₁}, …)` of up to three increments.
#[derive(Clone)]
pub struct MultiTimePayoff {
    times: Vec<f64>,
    f: VectorFn,
}

impl std::fmt::Debug for MultiTimePayoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiTimePayoff").field("times", &self.times).finish_non_exhaustive()
    }
}

impl MultiTimePayoff {
    pub const MAX_TIMES: usize = 3;

    pub fn new(
        times: Vec<f64>,
        tgrid: &TimeGrid,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, PdeError> {
        if times.is_empty() || times.len() > Self::MAX_TIMES {
            return Err(ModelError::invalid(
                "payoff.times",
                format!("need between 1 and {} observation times, got {}", Self::MAX_TIMES, times.len()),
            )
            .into());
        }
        let mut prev = 0.0;
        for &t in &times {
            if t <= prev || t > tgrid.horizon() * (1.0 + 1e-12) {
                return Err(ModelError::invalid("payoff.times", "times must be increasing in (0, T]").into());
            }
            if tgrid.node_index(t).is_none() {
                return Err(ModelError::invalid("payoff.times", format!("time {t} is not a grid node")).into());
            }
            prev = t;
        }
        Ok(Self { times, f: Arc::new(f) })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn eval(&self, increments: &[f64]) -> f64 {
        (self.f)(increments)
    }
}

/// `Ẽ_t[φ]` tabulated on the spatial grid as a function of the increments
/// observed up to `t` (row-major, first increment slowest).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalTable {
    pub grid: SpatialGrid,
    pub time: f64,
    /// Number of observed increments (table dimension).
    pub observed: usize,
    pub values: Vec<f64>,
}

impl ConditionalTable {
    /// Scalar value when nothing has been observed (`t = 0`).
    pub fn scalar(&self) -> Option<f64> {
        (self.observed == 0).then(|| self.values[0])
    }

    pub fn at_nodes(&self, idx: &[usize]) -> f64 {
        let m = self.grid.len();
        self.values[idx.iter().fold(0, |acc, &i| acc * m + i)]
    }

    /// One-increment table as a value slice, e.g. to feed back into `solve_generator_pde`.
    pub fn as_slice(&self) -> Option<ValueFunctionSlice> {
        (self.observed == 1).then(|| ValueFunctionSlice { grid: self.grid, time: self.time, values: self.values.clone() })
    }
}

/// Conditional expectation `Ẽ_t[φ]` by nested backward sweeps, one per increment after `t`.
pub fn conditional_expectation(
    gen: &ConvexGenerator,
    payoff: &MultiTimePayoff,
    t: f64,
    sgrid: &SpatialGrid,
    tgrid: &TimeGrid,
) -> Result<ConditionalTable, PdeError> {
    let times = payoff.times();
    let k = times.len();
    let observed = if t.abs() <= 1e-12 {
        0
    } else {
        match times.iter().position(|&s| (s - t).abs() <= 1e-9 * (1.0 + t.abs())) {
            Some(i) => i + 1,
            None => return Err(PdeError::ObservationTimeMismatch { t }),
        }
    };
    let m = sgrid.len();
    let center = sgrid.center();
    let start = |i: usize| if i == 0 { 0.0 } else { times[i - 1] };

    // Level k is the payoff itself, evaluated lazily on grid tuples.
    let mut table: Option<Vec<f64>> = None;
    for level in (observed + 1..=k).rev() {
        let duration = times[level - 1] - start(level - 1);
        let steps = steps_for(tgrid, duration);
        let prefixes = m.pow(level as u32 - 1);
        let upper = table.take();
        let results: Result<Vec<f64>, PdeError> = (0..prefixes)
            .into_par_iter()
            .map(|prefix| {
                let mut initial = Vec::with_capacity(m);
                let mut args = decode(prefix, level - 1, m, sgrid);
                args.push(0.0);
                for j in 0..m {
                    let v = match &upper {
                        Some(tab) => tab[prefix * m + j],
                        None => {
                            args[level - 1] = sgrid.node(j);
                            payoff.eval(&args)
                        }
                    };
                    if !v.is_finite() {
                        return Err(PdeError::NonFiniteValue { x: sgrid.node(j) });
                    }
                    initial.push(v);
                }
                evolve(gen, sgrid, &mut initial, duration, steps);
                Ok(initial[center])
            })
            .collect();
        table = Some(results?);
    }

    let values = match table {
        Some(v) => v,
        // Everything observed: the table is the payoff itself.
        None => (0..m.pow(k as u32)).map(|idx| payoff.eval(&decode(idx, k, m, sgrid))).collect(),
    };
    Ok(ConditionalTable { grid: *sgrid, time: t, observed, values })
}

fn decode(mut idx: usize, len: usize, m: usize, grid: &SpatialGrid) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for slot in out.iter_mut().rev() {
        *slot = grid.node(idx % m);
        idx /= m;
    }
    out
}

/// Residuals of `Ẽ[X₁] − Ẽ[X₂] ≤ Ê[X₁ − X₂]` over payoff pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    /// `Ẽ[X₁] − Ẽ[X₂] − Ê[X₁ − X₂]` per pair; nonpositive up to discretization error.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

pub fn check_domination(
    gen: &ConvexGenerator,
    pairs: &[(MarkovPayoff, MarkovPayoff)],
    sgrid: &SpatialGrid,
    tgrid: &TimeGrid,
) -> Result<DominationReport, PdeError> {
    let sublinear = gen.dominating();
    let residuals = pairs
        .iter()
        .map(|(x1, x2)| {
            let e1 = solve_generator_pde(gen, x1, sgrid, tgrid)?.value_at_origin();
            let e2 = solve_generator_pde(gen, x2, sgrid, tgrid)?.value_at_origin();
            let dom = solve_generator_pde(&sublinear, &x1.minus(x2), sgrid, tgrid)?.value_at_origin();
            Ok(e1 - e2 - dom)
        })
        .collect::<Result<Vec<_>, PdeError>>()?;
    let max_residual = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DominationReport { residuals, max_residual })
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

    fn grids(horizon: f64, m: usize) -> (SpatialGrid, TimeGrid) {
        let g = ConvexGenerator::sublinear(theta());
        (SpatialGrid::for_horizon(&g, horizon, m, 0.0).unwrap(), TimeGrid::new(horizon, 20).unwrap())
    }

    #[test]
    fn grid_geometry() {
        let g = SpatialGrid::new(3.0, 7).unwrap();
        assert_eq!(g.spacing(), 1.0);
        assert_eq!(g.node(g.center()), 0.0);
        assert_eq!(g.node(0), -3.0);
        assert_eq!(g.interpolate(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.5), 3.5);
        assert!(matches!(SpatialGrid::new(1.0, 1), Err(PdeError::GridTooCoarse(1))));
        assert!(SpatialGrid::new(1.0, 4).is_err());
    }

    #[test]
    fn constants_and_linear_are_fixed_points() {
        let (s, t) = grids(1.0, 101);
        let v = solve_generator_pde(&quad(), &MarkovPayoff::constant(5.0), &s, &t).unwrap();
        assert!(v.values.iter().all(|&u| u == 5.0));
        let v = solve_generator_pde(&quad(), &MarkovPayoff::identity(), &s, &t).unwrap();
        assert!(v.value_at_origin().abs() < 1e-12);
    }

    #[test]
    fn square_matches_dual_oracle() {
        // oracle: T·sup_c (c − ℓ(c)) on Θ
        let (s, t) = grids(1.0, 201);
        let zero = solve_generator_pde(&ConvexGenerator::sublinear(theta()), &MarkovPayoff::square(), &s, &t).unwrap();
        assert!((zero.value_at_origin() - 4.0).abs() < 1e-6);
        let q = solve_generator_pde(&quad(), &MarkovPayoff::square(), &s, &t).unwrap();
        assert!((q.value_at_origin() - 2.25).abs() < 1e-6);
    }

    #[test]
    fn negative_square_uses_lower_volatility() {
        let (s, t) = grids(1.0, 201);
        let neg = MarkovPayoff::polynomial(vec![0.0, 0.0, -1.0]).unwrap();
        let v = solve_generator_pde(&ConvexGenerator::sublinear(theta()), &neg, &s, &t).unwrap();
        assert!((v.value_at_origin() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_cubic_and_nan() {
        assert!(matches!(MarkovPayoff::polynomial(vec![0.0, 0.0, 0.0, 1.0]), Err(PdeError::PayoffGrowth(3))));
        let (s, t) = grids(1.0, 11);
        let nan = MarkovPayoff::new(Growth::Bounded, |x| if x > 1.0 { f64::NAN } else { 0.0 }).unwrap();
        assert!(matches!(solve_generator_pde(&quad(), &nan, &s, &t), Err(PdeError::NonFiniteValue { .. })));
    }

    #[test]
    fn conditional_examples() {
        let tgrid = TimeGrid::new(1.0, 10).unwrap();
        let zero = ConvexGenerator::sublinear(theta());
        let sgrid = SpatialGrid::for_horizon(&zero, 1.0, 121, 0.0).unwrap();
        let first = MultiTimePayoff::new(vec![0.5, 1.0], &tgrid, |x| x[0]).unwrap();
        let tab = conditional_expectation(&zero, &first, 0.5, &sgrid, &tgrid).unwrap();
        for j in 0..sgrid.len() {
            assert!((tab.at_nodes(&[j]) - sgrid.node(j)).abs() < 1e-12);
        }
        let second = MultiTimePayoff::new(vec![0.5, 1.0], &tgrid, |x| x[1] * x[1]).unwrap();
        let tab = conditional_expectation(&zero, &second, 0.5, &sgrid, &tgrid).unwrap();
        assert!(tab.values.iter().all(|v| (v - 2.0).abs() < 1e-6));
        assert!(matches!(
            conditional_expectation(&zero, &second, 0.3, &sgrid, &tgrid),
            Err(PdeError::ObservationTimeMismatch { .. })
        ));
    }

    #[test]
    fn tower_property() {
        let tgrid = TimeGrid::new(1.0, 10).unwrap();
        let g = quad();
        let sgrid = SpatialGrid::for_horizon(&g, 1.0, 101, 0.0).unwrap();
        let p = MultiTimePayoff::new(vec![0.5, 1.0], &tgrid, |x| (x[0] + x[1]).max(0.0) - 0.3 * x[0] * x[0]).unwrap();
        let direct = conditional_expectation(&g, &p, 0.0, &sgrid, &tgrid).unwrap().scalar().unwrap();
        let inner = conditional_expectation(&g, &p, 0.5, &sgrid, &tgrid).unwrap();
        let outer_grid = TimeGrid::new(0.5, 5).unwrap();
        let nested = solve_generator_pde(&g, &MarkovPayoff::from_slice(&inner.as_slice().unwrap()), &sgrid, &outer_grid)
            .unwrap()
            .value_at_origin();
        assert!((direct - nested).abs() < 1e-10, "{direct} vs {nested}");
    }

    #[test]
    fn domination_examples() {
        let (s, t) = grids(1.0, 201);
        let g = quad();
        let r = check_domination(
            &g,
            &[
                (MarkovPayoff::square(), MarkovPayoff::square()),
                (MarkovPayoff::square(), MarkovPayoff::constant(0.0)),
                (MarkovPayoff::constant(0.0), MarkovPayoff::square()),
            ],
            &s,
            &t,
        )
        .unwrap();
        assert!(r.residuals[0].abs() < 1e-9);
        // 2.25 − 0 − 4 and 0 − 2.25 − (−1)
        assert!((r.residuals[1] + 1.75).abs() < 1e-6);
        assert!((r.residuals[2] + 1.25).abs() < 1e-6);
        assert!(r.max_residual <= 1e-9);
    }

    #[test]
    fn slice_csv_header() {
        let (s, t) = grids(1.0, 3);
        let v = solve_generator_pde(&quad(), &MarkovPayoff::constant(1.0), &s, &t).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x,u\n-12,1\n0,1\n12,1\n"));
    }
}
