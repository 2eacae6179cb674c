use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use gexp_core::lq::{solve_gamma, FixedPointRun, LqError, LqSummary, ObstructionReport, SignCheck};
use gexp_core::mp::{mp_residual, sufficiency_check, variational_slope, MpError, ResidualReport, SlopeTable, SufficiencyReport};
use gexp_core::pde::{solve_generator_pde, PdeError};
use gexp_core::scenario::{pr11_argmax, robust_expectation, Payoff, ScenarioError};
use gexp_core::ConvexGenerator;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Loaded, PayoffSpec};
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: &'a str,
    version: &'a str,
    seed: u64,
    outputs: &'a [String],
}

/// Output directory plus provenance; writes happen in call order on one thread.
pub struct Run {
    pub command: &'static str,
    pub cfg: Loaded,
    out: PathBuf,
    hash: String,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &'static str, text: String, out: PathBuf) -> Result<Self, CliError> {
        let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
        let cfg = Loaded::parse(text)?;
        Ok(Self { command, cfg, out, hash, outputs: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        fs::create_dir_all(&self.out)?;
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, body: T) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        let env = Envelope { schema_version: SCHEMA_VERSION, command: self.command, config_hash: &self.hash, body };
        serde_json::to_writer_pretty(&mut w, &env)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> csv::Result<()>) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.outputs.push("run.json".into());
        let rec = RunRecord {
            schema_version: SCHEMA_VERSION,
            command: self.command,
            config_hash: &self.hash,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.cfg.run.seed,
            outputs: &self.outputs,
        };
        let mut w = BufWriter::new(File::create(self.out.join("run.json"))?);
        serde_json::to_writer_pretty(&mut w, &rec)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn pde_err(&self, e: PdeError) -> CliError {
        match e {
            PdeError::Invalid(m) => self.cfg.invalid(m),
            PdeError::PayoffGrowth(_) => CliError::Config { field: "payoff".into(), reason: e.to_string(), line: None },
            PdeError::GridTooCoarse(_) => CliError::Config { field: "grid.M".into(), reason: e.to_string(), line: None },
            other => CliError::Numerical(other.to_string()),
        }
    }

    fn scenario_err(&self, e: ScenarioError) -> CliError {
        match e {
            ScenarioError::Invalid(m) => self.cfg.invalid(m),
            other => CliError::Numerical(other.to_string()),
        }
    }

    fn lq_err(&self, e: LqError) -> CliError {
        match e {
            LqError::Invalid(m) => self.cfg.invalid(m),
            other => CliError::Numerical(other.to_string()),
        }
    }

    fn mp_err(&self, e: MpError) -> CliError {
        match e {
            MpError::DimensionMismatch { what, .. } => {
                let field = format!("run.mp.{what}");
                let line = crate::config::locate(&self.cfg.text, &field);
                CliError::Config { field, reason: e.to_string(), line }
            }
            MpError::Scenario(s) => self.scenario_err(s),
        }
    }

    fn pde_value(&self, gen: &ConvexGenerator) -> Result<(f64, gexp_core::pde::ValueFunctionSlice), CliError> {
        let payoff = self.cfg.payoff()?;
        let tgrid = self.cfg.time_grid()?;
        let sgrid = self.cfg.spatial_grid(gen)?;
        let slice = solve_generator_pde(gen, &payoff, &sgrid, &tgrid).map_err(|e| self.pde_err(e))?;
        Ok((slice.value_at_origin(), slice))
    }
}

#[derive(Serialize)]
struct EvalBody<'a> {
    value_at_origin: f64,
    payoff: &'a PayoffSpec,
    generator: &'a ConvexGenerator,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "N")]
    steps: usize,
    #[serde(rename = "M")]
    nodes: usize,
    x_max: f64,
}

pub fn eval(mut run: Run) -> Result<Run, CliError> {
    let gen = run.cfg.generator()?;
    let (value, slice) = run.pde_value(&gen)?;
    let spec = run.cfg.payoff_spec()?.clone();
    let g = &run.cfg.cfg.grid;
    let body = EvalBody {
        value_at_origin: value,
        payoff: &spec,
        generator: &gen,
        horizon: g.horizon,
        steps: g.steps,
        nodes: slice.grid.len(),
        x_max: slice.grid.x_max(),
    };
    run.json("eval.json", body)?;
    run.csv("slice.csv", |w| slice.write_csv(w))?;
    println!("value_at_origin = {value}");
    Ok(run)
}

#[derive(Serialize)]
struct ScenarioSide<'a> {
    value: f64,
    stderr: f64,
    gap: f64,
    tolerance: f64,
    within_tolerance: bool,
    stalled: bool,
    n_paths: usize,
    seed: u64,
    gamma: &'a [f64],
}

#[derive(Serialize)]
struct Pr11Row {
    eta: f64,
    argmax: f64,
    /// `2G̃′(2η)`, the maximizer of `½c·2η − ℓ(c)` over Θ.
    closed_form: f64,
}

#[derive(Serialize)]
struct ReprBody<'a> {
    payoff: &'a PayoffSpec,
    pde_value: f64,
    scenario: Option<ScenarioSide<'a>>,
    pr11: Vec<Pr11Row>,
}

pub fn repr(mut run: Run) -> Result<Run, CliError> {
    let gen = run.cfg.generator()?;
    run.cfg.check_pr11()?;
    let (pde, _) = run.pde_value(&gen)?;
    let spec = run.cfg.payoff_spec()?.clone();
    let tgrid = run.cfg.time_grid()?;
    let rs = run.cfg.cfg.run.repr.clone();
    let eval = if rs.scenario {
        let mc = run.cfg.monte_carlo()?;
        let markov = run.cfg.payoff()?;
        let payoff = Payoff::terminal(move |x| markov.eval(x));
        let opt = run.cfg.cfg.run.optimizer.clone();
        Some(robust_expectation(&payoff, &gen, tgrid, mc, &opt).map_err(|e| run.scenario_err(e))?)
    } else {
        None
    };
    let pr11 = rs
        .etas
        .iter()
        .map(|&eta| Pr11Row { eta, argmax: pr11_argmax(eta, &gen, tgrid, rs.resolution), closed_form: gen.maximizer(2.0 * eta) })
        .collect();
    let scenario = eval.as_ref().map(|e| {
        let tolerance = 3.0 * e.stderr + rs.tol;
        let gap = e.value - pde;
        ScenarioSide {
            value: e.value,
            stderr: e.stderr,
            gap,
            tolerance,
            within_tolerance: gap.abs() <= tolerance,
            stalled: e.stalled,
            n_paths: e.n_paths,
            seed: e.seed,
            gamma: &e.gamma,
        }
    });
    if let Some(s) = &scenario {
        println!("pde = {pde}  scenario = {} ± {}  gap = {}", s.value, s.stderr, s.gap);
    } else {
        println!("pde = {pde}");
    }
    run.json("repr.json", ReprBody { payoff: &spec, pde_value: pde, scenario, pr11 })?;
    run.csv("sandwich.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["method", "value", "stderr", "gap"])?;
        c.write_record(["pde".to_string(), pde.to_string(), "0".into(), "0".into()])?;
        if let Some(e) = &eval {
            c.write_record(["scenario".to_string(), e.value.to_string(), e.stderr.to_string(), (e.value - pde).to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    if let Some(e) = &eval {
        run.csv("optimizer_trace.csv", |w| e.trace.write_csv(w))?;
        run.csv("scenario.csv", |w| e.scenario().write_csv(w))?;
    }
    Ok(run)
}

#[derive(Serialize)]
#[serde(tag = "status")]
enum LqBody<'a> {
    #[serde(rename = "solved")]
    Solved {
        summary: LqSummary,
        x0: Vec<f64>,
        gamma: &'a [f64],
        compatibility: &'a ObstructionReport,
        runs: &'a [FixedPointRun],
        sign_checks: &'a [SignCheck],
    },
    #[serde(rename = "incompatible-condition-39")]
    Incompatible { obstruction: &'a ObstructionReport },
}

pub fn lq(mut run: Run) -> Result<Run, CliError> {
    let gen = run.cfg.generator()?;
    let grid = run.cfg.time_grid()?;
    let solver = run.cfg.solver()?;
    let prob = run.cfg.problem(gen, grid)?;
    match solve_gamma(&prob, &solver) {
        Ok(sol) => {
            let summary = sol.summary();
            println!("status = solved  J_analytic = {}", summary.j_analytic);
            let body = LqBody::Solved {
                summary,
                x0: prob.x0().iter().copied().collect(),
                gamma: &sol.gamma,
                compatibility: &sol.compatibility,
                runs: &sol.runs,
                sign_checks: &sol.sign_checks,
            };
            run.json("lq.json", body)?;
            run.csv("lq_solution.csv", |w| sol.write_csv(w))?;
        }
        Err(LqError::Incompatible(report)) => {
            println!("status = incompatible-condition-39  residual = {}", report.residual_sup);
            run.json("lq.json", LqBody::Incompatible { obstruction: &report })?;
        }
        Err(e) => return Err(run.lq_err(e)),
    }
    Ok(run)
}

#[derive(Serialize)]
struct DirectionSlopes<'a> {
    direction: &'a [f64],
    table: SlopeTable,
}

#[derive(Serialize)]
struct MpBody<'a> {
    offset: &'a [f64],
    residual: ResidualReport,
    residual_relative: f64,
    sufficiency: SufficiencyReport,
    sufficiency_all_pass: bool,
    slopes: Vec<DirectionSlopes<'a>>,
}

pub fn mp(mut run: Run) -> Result<Run, CliError> {
    let gen = run.cfg.generator()?;
    let grid = run.cfg.time_grid()?;
    let solver = run.cfg.solver()?;
    let prob = run.cfg.problem(gen, grid)?;
    run.cfg.check_mp(prob.m())?;
    let spec = run.cfg.cfg.run.mp.clone();
    let mc = if spec.directions.is_empty() { None } else { Some(run.cfg.monte_carlo()?) };
    let sol = solve_gamma(&prob, &solver).map_err(|e| run.lq_err(e))?;
    let offset = spec.offset.clone().unwrap_or_else(|| vec![0.0; prob.m()]);
    let seed = run.cfg.cfg.run.seed;
    let residual =
        mp_residual(&prob, &sol, &spec.domain, &offset, spec.residual_paths, seed).map_err(|e| run.mp_err(e))?;
    let sufficiency = sufficiency_check(&prob);
    let opt = run.cfg.cfg.run.optimizer.clone();
    let mut slopes = Vec::with_capacity(spec.directions.len());
    for dir in &spec.directions {
        let mc = mc.expect("monte carlo settings validated when directions are present");
        let table = variational_slope(&prob, &sol, dir, &spec.eps, mc, &opt).map_err(|e| run.mp_err(e))?;
        slopes.push(DirectionSlopes { direction: dir, table });
    }
    println!(
        "residual = {}  scale = {}  sufficiency = {}",
        residual.residual_unconstrained,
        residual.scale,
        if sufficiency.all_pass() { "pass" } else { "fail" }
    );
    let rows: Vec<(usize, f64, f64, f64, f64, f64)> = slopes
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.table.rows.iter().map(move |r| (i, r.eps, r.slope, r.expected, r.gap, r.stderr)))
        .collect();
    let body = MpBody {
        offset: &offset,
        residual_relative: residual.residual_unconstrained / residual.scale,
        residual,
        sufficiency_all_pass: sufficiency.all_pass(),
        sufficiency,
        slopes,
    };
    run.json("mp.json", body)?;
    run.csv("slopes.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["direction", "eps", "slope", "expected", "gap", "stderr"])?;
        for (i, eps, slope, expected, gap, se) in rows {
            c.write_record([i.to_string(), eps.to_string(), slope.to_string(), expected.to_string(), gap.to_string(), se.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    Ok(run)
}
