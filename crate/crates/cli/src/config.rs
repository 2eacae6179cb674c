//! Experiment config: one TOML file per run.

use gexp_core::lq::{Coefficients, LqProblem, LqSolverConfig};
use gexp_core::mp::ControlDomain;
use gexp_core::pde::{MarkovPayoff, SpatialGrid};
use gexp_core::scenario::{MonteCarlo, OptimizerConfig};
use gexp_core::{ConvexGenerator, ModelError, Penalty, TimeGrid, VolatilityInterval};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub grid: GridSpec,
    pub payoff: Option<PayoffSpec>,
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub run: RunSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub theta: ThetaSpec,
    pub penalty: Option<Penalty>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSpec {
    pub c_lo: f64,
    pub c_hi: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    /// Spatial truncation; derived from Θ and `T` when absent.
    pub x_max: Option<f64>,
    #[serde(rename = "M")]
    pub nodes: usize,
    pub padding: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 100, x_max: None, nodes: 401, padding: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    Identity,
    Square,
    Constant { value: f64 },
    Polynomial { coeffs: Vec<f64> },
    Call { strike: f64 },
    Indicator { strike: f64, width: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "b")]
    pub drift: Option<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Option<Rows>,
    #[serde(rename = "D")]
    pub d: Option<Rows>,
    pub sigma: Option<Vec<f64>>,
    #[serde(rename = "E")]
    pub e: Option<f64>,
    #[serde(rename = "Q")]
    pub q: Option<Rows>,
    #[serde(rename = "S")]
    pub s: Option<Rows>,
    #[serde(rename = "R")]
    pub r: Rows,
    #[serde(rename = "L")]
    pub l: Option<Rows>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
    pub n_paths: usize,
    pub blocks: usize,
    pub optimizer: OptimizerConfig,
    pub lq: LqSolverConfig,
    pub repr: ReprSpec,
    pub mp: MpSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_paths: 10_000,
            blocks: 10,
            optimizer: OptimizerConfig::default(),
            lq: LqSolverConfig::default(),
            repr: ReprSpec::default(),
            mp: MpSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprSpec {
    /// Run the scenario optimizer; the PDE value and pr11 table are always computed.
    pub scenario: bool,
    /// Absolute slack added to `3·stderr` in the sandwich check.
    pub tol: f64,
    pub etas: Vec<f64>,
    pub resolution: f64,
}

impl Default for ReprSpec {
    fn default() -> Self {
        Self { scenario: true, tol: 1e-2, etas: vec![-10.0, 0.0, 1.0], resolution: 1e-3 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpSpec {
    pub domain: ControlDomain,
    /// Constant added to `u*` when checking stationarity; zero checks the optimum itself.
    pub offset: Option<Vec<f64>>,
    pub residual_paths: usize,
    /// Open-loop shift directions for the variational slope table.
    pub directions: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
}

impl Default for MpSpec {
    fn default() -> Self {
        Self {
            domain: ControlDomain::AllSpace,
            offset: None,
            residual_paths: 1000,
            directions: Vec::new(),
            eps: vec![0.1, 0.03, 0.01],
        }
    }
}

/// A parsed config together with its source, for line-anchored validation errors.
pub struct Loaded {
    pub text: String,
    pub cfg: ExperimentConfig,
}

impl Loaded {
    pub fn parse(text: String) -> Result<Self, CliError> {
        let cfg = toml::from_str(&text).map_err(|e| CliError::Parse(e.to_string()))?;
        Ok(Self { text, cfg })
    }

    /// Wrap a module validation error, attaching the line of the offending key.
    pub fn invalid(&self, e: ModelError) -> CliError {
        let line = locate(&self.text, &e.field);
        CliError::Config { field: e.field, reason: e.reason, line }
    }

    fn fail<T>(&self, field: &str, reason: impl Into<String>) -> Result<T, CliError> {
        Err(self.invalid(ModelError::invalid(field, reason)))
    }

    pub fn generator(&self) -> Result<ConvexGenerator, CliError> {
        let g = &self.cfg.generator;
        let theta = VolatilityInterval::new(g.theta.c_lo, g.theta.c_hi).map_err(|e| self.invalid(e.within("generator")))?;
        let penalty = g.penalty.clone().unwrap_or(Penalty::Zero);
        ConvexGenerator::new(theta, penalty).map_err(|e| self.invalid(e.within("generator")))
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.cfg.grid.horizon, self.cfg.grid.steps).map_err(|e| self.invalid(e))
    }

    pub fn spatial_grid(&self, gen: &ConvexGenerator) -> Result<SpatialGrid, CliError> {
        let g = &self.cfg.grid;
        if !(g.padding.is_finite() && g.padding >= 0.0) {
            return self.fail("grid.padding", format!("must be finite and >= 0, got {}", g.padding));
        }
        let grid = match g.x_max {
            Some(x) => SpatialGrid::new(x, g.nodes),
            None => SpatialGrid::for_horizon(gen, g.horizon, g.nodes, g.padding),
        };
        grid.map_err(|e| match e {
            gexp_core::pde::PdeError::Invalid(m) => self.invalid(m),
            other => self.invalid(ModelError::invalid("grid.M", other.to_string())),
        })
    }

    pub fn payoff_spec(&self) -> Result<&PayoffSpec, CliError> {
        match &self.cfg.payoff {
            Some(p) => Ok(p),
            None => self.fail("payoff", "this command needs a [payoff] section"),
        }
    }

    pub fn payoff(&self) -> Result<MarkovPayoff, CliError> {
        let finite = |field: &str, v: f64| -> Result<(), CliError> {
            if v.is_finite() {
                Ok(())
            } else {
                self.fail(field, format!("must be finite, got {v}"))
            }
        };
        Ok(match self.payoff_spec()? {
            PayoffSpec::Identity => MarkovPayoff::identity(),
            PayoffSpec::Square => MarkovPayoff::square(),
            PayoffSpec::Constant { value } => {
                finite("payoff.value", *value)?;
                MarkovPayoff::constant(*value)
            }
            PayoffSpec::Polynomial { coeffs } => {
                if coeffs.is_empty() {
                    return self.fail("payoff.coeffs", "need at least one coefficient");
                }
                for c in coeffs {
                    finite("payoff.coeffs", *c)?;
                }
                MarkovPayoff::polynomial(coeffs.clone())
                    .map_err(|e| self.invalid(ModelError::invalid("payoff.coeffs", e.to_string())))?
            }
            PayoffSpec::Call { strike } => {
                finite("payoff.strike", *strike)?;
                MarkovPayoff::call(*strike)
            }
            PayoffSpec::Indicator { strike, width } => {
                finite("payoff.strike", *strike)?;
                if !(width.is_finite() && *width > 0.0) {
                    return self.fail("payoff.width", format!("must be finite and > 0, got {width}"));
                }
                MarkovPayoff::smoothed_indicator(*strike, *width)
            }
        })
    }

    pub fn monte_carlo(&self) -> Result<MonteCarlo, CliError> {
        let r = &self.cfg.run;
        if r.n_paths == 0 {
            return self.fail("run.n_paths", "must be >= 1");
        }
        if r.blocks == 0 || self.cfg.grid.steps % r.blocks != 0 {
            return self.fail("run.blocks", format!("must divide grid.N = {}, got {}", self.cfg.grid.steps, r.blocks));
        }
        let o = &r.optimizer;
        if !(o.tol.is_finite() && o.tol >= 0.0) || !(o.xtol.is_finite() && o.xtol > 0.0) || o.pilot_paths == Some(0) {
            return self.fail("run.optimizer", "tol must be >= 0, xtol > 0 and pilot_paths >= 1");
        }
        Ok(MonteCarlo { n_paths: r.n_paths, seed: r.seed, blocks: r.blocks })
    }

    pub fn solver(&self) -> Result<LqSolverConfig, CliError> {
        let c = self.cfg.run.lq;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if c.substeps == 0 {
            return self.fail("run.lq.substeps", "must be >= 1");
        }
        if !(c.damping > 0.0 && c.damping <= 1.0) {
            return self.fail("run.lq.damping", format!("must lie in (0, 1], got {}", c.damping));
        }
        if !(positive(c.blowup_bound) && positive(c.tol) && positive(c.start_agreement) && positive(c.residual_tol)) {
            return self.fail("run.lq", "tolerances and blowup_bound must be finite and > 0");
        }
        Ok(c)
    }

    pub fn problem(&self, gen: ConvexGenerator, grid: TimeGrid) -> Result<LqProblem, CliError> {
        let Some(p) = &self.cfg.problem else {
            return self.fail("problem", "this command needs a [problem] section");
        };
        let n = p.x0.len();
        if n == 0 {
            return self.fail("problem.x0", "state dimension must be positive");
        }
        let m = p.b.first().map_or(0, |r| r.len());
        if m == 0 {
            return self.fail("problem.B", "control dimension must be positive");
        }
        let mat = |name: &str, rows: Option<&Rows>, r: usize, c: usize| self.matrix(name, rows, r, c);
        let vec = |name: &str, v: Option<&Vec<f64>>| self.vector(name, v, n);
        let e = p.e.unwrap_or(0.0);
        if !e.is_finite() {
            return self.fail("problem.E", "must be finite");
        }
        let coefs = Coefficients {
            a: mat("A", Some(&p.a), n, n)?,
            b: mat("B", Some(&p.b), n, m)?,
            drift: vec("b", p.drift.as_ref())?,
            c: mat("C", p.c.as_ref(), n, n)?,
            d: mat("D", p.d.as_ref(), n, m)?,
            sigma: vec("sigma", p.sigma.as_ref())?,
            e,
            q: mat("Q", p.q.as_ref(), n, n)?,
            s: mat("S", p.s.as_ref(), m, n)?,
            r: mat("R", Some(&p.r), m, m)?,
        };
        let l = mat("L", p.l.as_ref(), n, n)?;
        let x0 = vec("x0", Some(&p.x0))?;
        LqProblem::constant(grid, gen, coefs, l, x0).map_err(|e| self.invalid(e))
    }

    /// Matrix literal as nested row lists; absent means zeros.
    fn matrix(&self, name: &str, rows: Option<&Rows>, r: usize, c: usize) -> Result<DMatrix<f64>, CliError> {
        let field = format!("problem.{name}");
        let Some(rows) = rows else {
            return Ok(DMatrix::zeros(r, c));
        };
        if rows.len() != r || rows.iter().any(|row| row.len() != c) {
            return self.fail(&field, format!("expected a {r}x{c} matrix"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return self.fail(&field, "entries must be finite");
        }
        Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
    }

    fn vector(&self, name: &str, v: Option<&Vec<f64>>, n: usize) -> Result<DVector<f64>, CliError> {
        let field = format!("problem.{name}");
        let Some(v) = v else {
            return Ok(DVector::zeros(n));
        };
        if v.len() != n {
            return self.fail(&field, format!("expected length {n}, got {}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return self.fail(&field, "entries must be finite");
        }
        Ok(DVector::from_column_slice(v))
    }

    pub fn check_pr11(&self) -> Result<(), CliError> {
        let r = &self.cfg.run.repr;
        if !(r.resolution.is_finite() && r.resolution > 0.0) {
            return self.fail("run.repr.resolution", format!("must be finite and > 0, got {}", r.resolution));
        }
        if r.etas.iter().any(|e| !e.is_finite()) {
            return self.fail("run.repr.etas", "must be finite");
        }
        if !(r.tol.is_finite() && r.tol >= 0.0) {
            return self.fail("run.repr.tol", "must be finite and >= 0");
        }
        Ok(())
    }

    pub fn check_mp(&self, m: usize) -> Result<(), CliError> {
        let s = &self.cfg.run.mp;
        if s.residual_paths == 0 {
            return self.fail("run.mp.residual_paths", "must be >= 1");
        }
        if s.eps.iter().any(|e| !(e.is_finite() && *e != 0.0)) {
            return self.fail("run.mp.eps", "step sizes must be finite and nonzero");
        }
        if let Some(o) = &s.offset {
            if o.len() != m || o.iter().any(|v| !v.is_finite()) {
                return self.fail("run.mp.offset", format!("expected {m} finite values"));
            }
        }
        if s.directions.iter().any(|d| d.len() != m || d.iter().any(|v| !v.is_finite())) {
            return self.fail("run.mp.directions", format!("each direction needs {m} finite values"));
        }
        if let ControlDomain::Box { lo, hi } = &s.domain {
            if lo.len() != m || hi.len() != m || lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
                return self.fail("run.mp.domain", format!("box needs {m} finite bounds with lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Best-effort line of a dotted key such as `generator.theta.c_lo`: the deepest
/// table header or `key =` line that matches a prefix of the path.
pub fn locate(text: &str, field: &str) -> Option<usize> {
    let segs: Vec<&str> = field.split('.').collect();
    for depth in (1..=segs.len()).rev() {
        let table = segs[..depth - 1].join(".");
        let key = segs[depth - 1];
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
                current = h.trim().to_string();
                let full = if table.is_empty() { key.to_string() } else { format!("{table}.{key}") };
                if current == full {
                    return Some(i + 1);
                }
                continue;
            }
            if current == table {
                if let Some(rest) = line.strip_prefix(key) {
                    if rest.trim_start().starts_with('=') {
                        return Some(i + 1);
                    }
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "[generator]\ntheta = { c_lo = 0.0, c_hi = 4.0 }\n\n[grid]\nT = 1.0\nM = 11\n\n[run.lq]\nsubsteps = 0\n";

    #[test]
    fn locate_finds_keys_and_tables() {
        assert_eq!(locate(SAMPLE, "generator.theta.c_lo"), Some(2));
        assert_eq!(locate(SAMPLE, "grid.M"), Some(6));
        assert_eq!(locate(SAMPLE, "run.lq.substeps"), Some(9));
        assert_eq!(locate(SAMPLE, "run.lq"), Some(8));
        assert_eq!(locate(SAMPLE, "problem.Q"), None);
    }

    #[test]
    fn generator_errors_carry_path_and_line() {
        let l = Loaded::parse(SAMPLE.to_string()).unwrap();
        match l.generator() {
            Err(CliError::Config { field, line, .. }) => {
                assert_eq!(field, "generator.theta.c_lo");
                assert_eq!(line, Some(2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_and_unknown_keys() {
        let l = Loaded::parse("[generator]\ntheta = { c_lo = 1.0, c_hi = 4.0 }\n".into()).unwrap();
        assert_eq!(l.cfg.grid.steps, 100);
        assert_eq!(l.cfg.run.mp.domain, ControlDomain::AllSpace);
        assert!(l.generator().is_ok());
        let bad = Loaded::parse("[generator]\ntheta = { c_lo = 1.0, c_hi = 4.0 }\nextra = 1\n".into());
        match bad {
            Err(CliError::Parse(msg)) => assert!(msg.contains("line 3"), "{msg}"),
            _ => panic!("unknown key accepted"),
        }
    }

    #[test]
    fn problem_shapes() {
        let text = "[generator]\ntheta = { c_lo = 1.0, c_hi = 4.0 }\n[problem]\nA = [[0.0]]\nB = [[1.0]]\nR = [[1.0]]\nQ = [[1.0, 0.0]]\nx0 = [1.0]\n";
        let l = Loaded::parse(text.into()).unwrap();
        let gen = l.generator().unwrap();
        match l.problem(gen, l.time_grid().unwrap()) {
            Err(CliError::Config { field, line, .. }) => {
                assert_eq!(field, "problem.Q");
                assert_eq!(line, Some(7));
            }
            other => panic!("{other:?}"),
        }
    }
}
