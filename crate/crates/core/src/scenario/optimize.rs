//! Multi-start coordinate ascent over scenario blocks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::CostEngine;
use super::system::{ControlledSde, LinearDriver};
use super::ScenarioError;
use crate::gcore::VolatilityInterval;

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Maximize `f` on `[a, b]` by Brent's parabolic/golden-section method.
/// Returns the best point seen and its value.
pub fn brent_max<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    a: f64,
    b: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<(f64, f64), E> {
    let (mut lo, mut hi) = (a, b);
    let mut x = lo + GOLDEN * (hi - lo);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        let tol1 = xtol + 1e-12 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (lo - x) && p < q * (hi - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = if mid > x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= mid { lo - x } else { hi - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = -f(u)?;
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok((x, -fx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Random starts added to the four deterministic ones.
    pub random_starts: usize,
    pub max_sweeps: usize,
    /// Stop when a sweep improves the penalized value by less than this.
    pub tol: f64,
    /// Line-search resolution relative to the width of Θ.
    pub xtol: f64,
    /// Starts are run on this many leading paths, then the best is polished on all paths.
    pub pilot_paths: Option<usize>,
    /// A start whose iterate comes within this sup-distance of an earlier start's
    /// terminal point is stopped and recorded as merged.
    pub merge_radius: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { random_starts: 4, max_sweeps: 200, tol: 1e-8, xtol: 1e-5, pilot_paths: Some(4096), merge_radius: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartTrace {
    pub start: usize,
    pub kind: String,
    pub sweeps: usize,
    pub initial_value: f64,
    pub value: f64,
    pub merged_into: Option<usize>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerTrace {
    pub starts: Vec<StartTrace>,
    /// Sweeps of the full-sample polish when a pilot sample was used.
    pub polish_sweeps: Option<usize>,
    pub evaluations: usize,
}

impl OptimizerTrace {
    /// CSV with columns `start, kind, sweeps, initial_value, value, merged_into, gamma_0, …`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let blocks = self.starts.first().map_or(0, |s| s.gamma.len());
        let mut header: Vec<String> =
            ["start", "kind", "sweeps", "initial_value", "value", "merged_into"].iter().map(|s| s.to_string()).collect();
        header.extend((0..blocks).map(|b| format!("gamma_{b}")));
        w.write_record(&header)?;
        for s in &self.starts {
            let mut row = vec![
                s.start.to_string(),
                s.kind.clone(),
                s.sweeps.to_string(),
                s.initial_value.to_string(),
                s.value.to_string(),
                s.merged_into.map_or(String::new(), |m| m.to_string()),
            ];
            row.extend(s.gamma.iter().map(|g| g.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) struct Ascent {
    pub gamma: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
    pub trace: OptimizerTrace,
    pub stalled: bool,
}

fn starting_points(theta: &VolatilityInterval, minimizer: f64, blocks: usize, cfg: &OptimizerConfig, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        ("c_lo".to_string(), vec![theta.lo(); blocks]),
        ("c_hi".to_string(), vec![theta.hi(); blocks]),
        ("midpoint".to_string(), vec![theta.midpoint(); blocks]),
        ("penalty_minimizer".to_string(), vec![minimizer; blocks]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    for i in 0..cfg.random_starts {
        let g = (0..blocks).map(|_| theta.lo() + theta.width() * rng.gen::<f64>()).collect();
        out.push((format!("random_{i}"), g));
    }
    out
}

/// Coordinate sweeps from the engine's committed scenario. Returns sweeps used and
/// the index of the earlier terminal point it merged into, if any.
fn sweep<S, D>(
    engine: &mut CostEngine<'_, S, D>,
    theta: &VolatilityInterval,
    cfg: &OptimizerConfig,
    earlier: &[Vec<f64>],
) -> Result<(usize, Option<usize>), ScenarioError>
where
    S: ControlledSde + ?Sized,
    D: LinearDriver + ?Sized,
{
    let xtol = cfg.xtol * theta.width();
    let mut value = engine.value();
    // line searches start on a bracket sized by the previous sweep's largest move
    let mut radius = theta.width();
    for n in 1..=cfg.max_sweeps {
        let before = value;
        let mut largest = 0.0f64;
        for j in 0..engine.blocks() {
            let cur = engine.gamma()[j];
            let (lo, hi) = (theta.clamp(cur - radius), theta.clamp(cur + radius));
            let (mut x, mut fx) = brent_max(|g| engine.probe(j, g), lo, hi, xtol, 100)?;
            let inner_edge = (lo > theta.lo() && x - lo < 10.0 * xtol) || (hi < theta.hi() && hi - x < 10.0 * xtol);
            if inner_edge {
                (x, fx) = brent_max(|g| engine.probe(j, g), theta.lo(), theta.hi(), xtol, 100)?;
            }
            for end in [theta.lo(), theta.hi()] {
                if (x - end).abs() < 10.0 * xtol {
                    let fe = engine.probe(j, end)?;
                    if fe > fx {
                        (x, fx) = (end, fe);
                    }
                }
            }
            if fx > value {
                largest = largest.max((x - cur).abs());
                value = engine.commit(j, x)?;
            }
        }
        radius = (4.0 * largest).clamp(1e-3 * theta.width(), theta.width());
        if value - before < cfg.tol {
            return Ok((n, None));
        }
        let here = engine.gamma();
        if let Some(i) = earlier
            .iter()
            .position(|o| o.iter().zip(here).all(|(a, b)| (a - b).abs() < cfg.merge_radius))
        {
            return Ok((n, Some(i)));
        }
    }
    Ok((cfg.max_sweeps, None))
}

pub(crate) fn maximize<'a, S, D>(
    full: &mut CostEngine<'a, S, D>,
    pilot: Option<&mut CostEngine<'a, S, D>>,
    theta: &VolatilityInterval,
    minimizer: f64,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Ascent, ScenarioError>
where
    S: ControlledSde + ?Sized,
    D: LinearDriver + ?Sized,
{
    let blocks = full.blocks();
    let has_pilot = pilot.is_some();
    let engine = match pilot {
        Some(p) => p,
        None => &mut *full,
    };
    let mut starts = Vec::new();
    let mut terminals: Vec<Vec<f64>> = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    let mut improved = false;
    for (i, (kind, g0)) in starting_points(theta, minimizer, blocks, cfg, seed).into_iter().enumerate() {
        let initial_value = engine.reset(&g0)?;
        let (sweeps, merged_into) = sweep(engine, theta, cfg, &terminals)?;
        let value = engine.value();
        improved |= value > initial_value;
        if best.is_none_or(|(_, v, _)| value > v) {
            best = Some((i, value, engine.stderr()));
        }
        terminals.push(engine.gamma().to_vec());
        starts.push(StartTrace { start: i, kind, sweeps, initial_value, value, merged_into, gamma: engine.gamma().to_vec() });
    }
    let (bi, mut value, mut stderr) = best.expect("at least four starts");
    let mut gamma = terminals[bi].clone();
    let mut evaluations = engine.evaluations();
    let mut polish_sweeps = None;
    if has_pilot {
        full.reset(&gamma)?;
        let (sweeps, _) = sweep(full, theta, cfg, &[])?;
        polish_sweeps = Some(sweeps);
        value = full.value();
        stderr = full.stderr();
        gamma = full.gamma().to_vec();
        evaluations += full.evaluations();
    }
    Ok(Ascent {
        gamma,
        value,
        stderr,
        trace: OptimizerTrace { starts, polish_sweeps, evaluations },
        stalled: !improved,
    })
}
