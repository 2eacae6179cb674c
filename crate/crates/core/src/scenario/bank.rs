//! Standard normal draws shared by every scenario evaluation (common random numbers).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::gcore::{DeterministicScenario, TimeGrid};

/// Paths are processed in chunks of this many lanes.
pub const CHUNK: usize = 256;

/// `z[path][step]` stored as `[chunk][step][lane]`. Path `p` draws from the
/// ChaCha8 stream `p` of the master seed, so contents do not depend on the
/// number of worker threads.
#[derive(Debug, Clone)]
pub struct NormalBank {
    n_paths: usize,
    steps: usize,
    seed: u64,
    z: Vec<f64>,
}

impl NormalBank {
    pub fn new(n_paths: usize, steps: usize, seed: u64) -> Self {
        let mut z = vec![0.0; n_paths * steps];
        z.par_chunks_mut(CHUNK * steps).enumerate().for_each(|(c, block)| {
            let lanes = block.len() / steps.max(1);
            for lane in 0..lanes {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((c * CHUNK + lane) as u64);
                for k in 0..steps {
                    block[k * lanes + lane] = StandardNormal.sample(&mut rng);
                }
            }
        });
        Self { n_paths, steps, seed, z }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn chunks(&self) -> usize {
        self.n_paths.div_ceil(CHUNK)
    }

    pub fn lanes(&self, chunk: usize) -> usize {
        CHUNK.min(self.n_paths - chunk * CHUNK)
    }

    /// Draws of one chunk, laid out `[step][lane]`.
    pub fn chunk(&self, chunk: usize) -> &[f64] {
        let start = chunk * CHUNK * self.steps;
        &self.z[start..start + self.lanes(chunk) * self.steps]
    }

    pub fn get(&self, path: usize, step: usize) -> f64 {
        let (c, lane) = (path / CHUNK, path % CHUNK);
        self.chunk(c)[step * self.lanes(c) + lane]
    }
}

/// Increments of `B` under one scenario measure.
#[derive(Debug, Clone, Serialize)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    /// `ΔB`, path-major: `increments[p * N + k]`.
    pub increments: Vec<f64>,
    /// `Δ⟨B⟩_k = γ_k Δt`, identical on every path.
    pub bracket: Vec<f64>,
}

impl PathEnsemble {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.steps();
        &self.increments[p * n..(p + 1) * n]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.path(p).iter().sum()
    }

    pub fn bracket_total(&self) -> f64 {
        self.gamma().iter().sum::<f64>() * self.grid.dt()
    }

    /// Scenario variances recovered from the bracket, `γ_k = Δ⟨B⟩_k / Δt`.
    pub fn gamma(&self) -> Vec<f64> {
        self.bracket.iter().map(|b| b / self.grid.dt()).collect()
    }

    /// CSV with columns `path, k, t, dB, dbracket`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "k", "t", "dB", "dbracket"])?;
        for p in 0..self.n_paths {
            for (k, db) in self.path(p).iter().enumerate() {
                w.write_record([
                    p.to_string(),
                    k.to_string(),
                    self.grid.time(k).to_string(),
                    db.to_string(),
                    self.bracket[k].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Realize `n` paths of `B` under the scenario measure `P_γ`.
pub fn simulate_b(scn: &DeterministicScenario, n: usize, seed: u64) -> PathEnsemble {
    let grid = *scn.grid();
    let bank = NormalBank::new(n, grid.steps(), seed);
    simulate_b_with(scn, &bank)
}

pub fn simulate_b_with(scn: &DeterministicScenario, bank: &NormalBank) -> PathEnsemble {
    let grid = *scn.grid();
    let steps = grid.steps();
    let scale: Vec<f64> = scn.gamma().iter().map(|g| (g * grid.dt()).sqrt()).collect();
    let mut increments = vec![0.0; bank.n_paths() * steps];
    increments.par_chunks_mut(steps).enumerate().for_each(|(p, row)| {
        for (k, v) in row.iter_mut().enumerate() {
            *v = scale[k] * bank.get(p, k);
        }
    });
    PathEnsemble {
        grid,
        n_paths: bank.n_paths(),
        seed: bank.seed(),
        increments,
        bracket: scn.gamma().iter().map(|g| g * grid.dt()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcore::VolatilityInterval;

    #[test]
    fn bank_layout_matches_streams() {
        let bank = NormalBank::new(300, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(299);
        let first: f64 = StandardNormal.sample(&mut rng);
        let second: f64 = StandardNormal.sample(&mut rng);
        assert_eq!(bank.get(299, 0), first);
        assert_eq!(bank.get(299, 1), second);
        assert_eq!(bank.chunks(), 2);
        assert_eq!(bank.lanes(1), 44);
    }

    #[test]
    fn terminal_variance() {
        let th = VolatilityInterval::new(1.0, 4.0).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let scn = DeterministicScenario::constant(grid, 1.0, &th).unwrap();
        let n = 100_000;
        let ens = simulate_b(&scn, n, 42);
        let ends: Vec<f64> = (0..n).map(|p| ens.terminal(p)).collect();
        let mean = ends.iter().sum::<f64>() / n as f64;
        let var = ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 4.0 / (n as f64).sqrt(), "{var}");
        let again = simulate_b(&scn, n, 42);
        assert_eq!(ens.increments, again.increments);
        let low = DeterministicScenario::constant(grid, 1.0, &th).unwrap();
        assert_eq!(simulate_b(&low, 4, 1).bracket_total(), 1.0);
    }

    #[test]
    fn ensemble_csv_header() {
        let th = VolatilityInterval::new(1.0, 4.0).unwrap();
        let scn = DeterministicScenario::constant(TimeGrid::new(1.0, 2).unwrap(), 4.0, &th).unwrap();
        let mut buf = Vec::new();
        simulate_b(&scn, 1, 3).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,k,t,dB,dbracket\n0,0,0,"));
        assert_eq!(text.lines().count(), 3);
    }
}
