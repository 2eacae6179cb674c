//! Common-random-numbers evaluation of the penalized discounted cost with
//! per-block checkpoints, so that changing block `j` only re-simulates from `j`.

use rayon::prelude::*;

use super::bank::{NormalBank, CHUNK};
use super::system::{discount_weights, ControlledSde, LinearDriver};
use super::ScenarioError;
use crate::error::ModelError;
use crate::gcore::{ConvexGenerator, TimeGrid};

/// Sum and sum of squares of the per-path discounted payoffs of one chunk.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    sum: f64,
    sumsq: f64,
    bad_lane: Option<usize>,
}

pub struct CostEngine<'a, S: ?Sized, D: ?Sized> {
    sde: &'a S,
    driver: &'a D,
    gen: &'a ConvexGenerator,
    bank: &'a NormalBank,
    grid: TimeGrid,
    n_paths: usize,
    blocks: usize,
    per_block: usize,
    dim: usize,
    lambda: Vec<f64>,
    block_weight: Vec<f64>,
    gamma: Vec<f64>,
    /// `[chunk][boundary][i * lanes + lane]`: state at the start of each block.
    states: Vec<f64>,
    /// `[chunk][boundary][lane]`: discounted reward accumulated before each block.
    acc: Vec<f64>,
    mean: f64,
    stderr: f64,
    evaluations: usize,
}

impl<'a, S, D> CostEngine<'a, S, D>
where
    S: ControlledSde + ?Sized,
    D: LinearDriver + ?Sized,
{
    /// Engine over the first `n_paths` paths of `bank` with `blocks` scenario blocks.
    pub fn new(
        sde: &'a S,
        driver: &'a D,
        gen: &'a ConvexGenerator,
        bank: &'a NormalBank,
        grid: TimeGrid,
        n_paths: usize,
        blocks: usize,
    ) -> Result<Self, ScenarioError> {
        if bank.steps() != grid.steps() {
            return Err(ScenarioError::GridMismatch);
        }
        if n_paths == 0 || n_paths > bank.n_paths() {
            return Err(ModelError::invalid("run.n_paths", format!("must be in 1..={}", bank.n_paths())).into());
        }
        if blocks == 0 || grid.steps() % blocks != 0 {
            return Err(ModelError::invalid(
                "run.blocks",
                format!("must divide the step count {}, got {blocks}", grid.steps()),
            )
            .into());
        }
        let per_block = grid.steps() / blocks;
        let dim = sde.dim();
        let lambda = discount_weights(driver, grid.steps(), grid.dt());
        let block_weight = (0..blocks)
            .map(|b| (b * per_block..(b + 1) * per_block).map(|k| lambda[k] * grid.dt()).sum())
            .collect();
        let mut engine = Self {
            sde,
            driver,
            gen,
            bank,
            grid,
            n_paths,
            blocks,
            per_block,
            dim,
            lambda,
            block_weight,
            gamma: vec![gen.penalty_minimizer(); blocks],
            states: vec![0.0; n_paths * dim * blocks],
            acc: vec![0.0; n_paths * blocks],
            mean: 0.0,
            stderr: 0.0,
            evaluations: 0,
        };
        let mut x0 = vec![0.0; dim];
        sde.initial_state(&mut x0);
        let (dim, blocks) = (engine.dim, engine.blocks);
        for region in engine.states.chunks_mut(CHUNK * dim * blocks) {
            let lanes = region.len() / (dim * blocks);
            for (i, v) in x0.iter().enumerate() {
                region[i * lanes..(i + 1) * lanes].fill(*v);
            }
        }
        Ok(engine)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Penalized value of the committed scenario.
    pub fn value(&self) -> f64 {
        self.mean - self.penalty(&self.gamma)
    }

    pub fn stderr(&self) -> f64 {
        self.stderr
    }

    /// Number of probe and commit runs so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Discount weights `Λ_k`, `k = 0..=N`.
    pub fn discount(&self) -> &[f64] {
        &self.lambda
    }

    /// `Σ_k Λ_k ℓ(γ_k) Δt` for block values `gamma`.
    pub fn penalty(&self, gamma: &[f64]) -> f64 {
        let pen = self.gen.penalty();
        gamma.iter().zip(&self.block_weight).map(|(g, w)| w * pen.at(*g)).sum()
    }

    fn lanes(&self, chunk: usize) -> usize {
        CHUNK.min(self.n_paths - chunk * CHUNK)
    }

    /// Simulate one chunk from the start of block `from`, with block `from` set to `g`.
    #[allow(clippy::too_many_arguments)]
    fn run_chunk(
        &self,
        chunk: usize,
        from: usize,
        g: f64,
        x: &mut [f64],
        acc: &mut [f64],
        mut sink: Option<(&mut [f64], &mut [f64])>,
    ) -> Moments {
        let lanes = acc.len();
        let dim = self.dim;
        let dt = self.grid.dt();
        let z = self.bank.chunk(chunk);
        let stride = self.bank.lanes(chunk);
        let mut dw = vec![0.0; lanes];
        for block in from..self.blocks {
            let gamma = if block == from { g } else { self.gamma[block] };
            if block > from {
                if let Some((xs, accs)) = sink.as_mut() {
                    xs[block * lanes * dim..(block + 1) * lanes * dim].copy_from_slice(x);
                    accs[block * lanes..(block + 1) * lanes].copy_from_slice(acc);
                }
            }
            let scale = (gamma * dt).sqrt();
            for k in block * self.per_block..(block + 1) * self.per_block {
                self.driver.accumulate_chunk(k, gamma, self.lambda[k] * dt, x, acc);
                for (w, zk) in dw.iter_mut().zip(&z[k * stride..k * stride + lanes]) {
                    *w = scale * zk;
                }
                self.sde.step_chunk(k, dt, gamma, x, &dw);
            }
        }
        self.driver.terminal_chunk(self.lambda[self.grid.steps()], x, acc);
        let mut m = Moments::default();
        for (lane, &v) in acc.iter().enumerate() {
            if !v.is_finite() && m.bad_lane.is_none() {
                m.bad_lane = Some(lane);
            }
            m.sum += v;
            m.sumsq += v * v;
        }
        m
    }

    fn finish(&mut self, parts: Vec<Moments>) -> Result<(f64, f64), ScenarioError> {
        self.evaluations += 1;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for (c, m) in parts.iter().enumerate() {
            if let Some(lane) = m.bad_lane {
                return Err(ScenarioError::NonFiniteState { path: c * CHUNK + lane, step: self.grid.steps() });
            }
            sum += m.sum;
            sumsq += m.sumsq;
        }
        let n = self.n_paths as f64;
        let mean = sum / n;
        let var = if self.n_paths > 1 { ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        Ok((mean, (var / n).sqrt()))
    }

    /// Penalized value with block `j` replaced by `g`; committed state is unchanged.
    pub fn probe(&mut self, j: usize, g: f64) -> Result<f64, ScenarioError> {
        let (dim, blocks) = (self.dim, self.blocks);
        let this = &*self;
        let parts: Vec<Moments> = this
            .states
            .par_chunks(CHUNK * dim * blocks)
            .zip(this.acc.par_chunks(CHUNK * blocks))
            .enumerate()
            .map(|(c, (xs, accs))| {
                let lanes = this.lanes(c);
                let mut x = xs[j * lanes * dim..(j + 1) * lanes * dim].to_vec();
                let mut acc = accs[j * lanes..(j + 1) * lanes].to_vec();
                this.run_chunk(c, j, g, &mut x, &mut acc, None)
            })
            .collect();
        let (mean, _) = self.finish(parts)?;
        let mut gamma = self.gamma.clone();
        gamma[j] = g;
        Ok(mean - self.penalty(&gamma))
    }

    /// Set block `j` to `g` and refresh checkpoints after it.
    pub fn commit(&mut self, j: usize, g: f64) -> Result<f64, ScenarioError> {
        let (dim, blocks) = (self.dim, self.blocks);
        let mut states = std::mem::take(&mut self.states);
        let mut accv = std::mem::take(&mut self.acc);
        self.gamma[j] = g;
        let this = &*self;
        let parts: Vec<Moments> = states
            .par_chunks_mut(CHUNK * dim * blocks)
            .zip(accv.par_chunks_mut(CHUNK * blocks))
            .enumerate()
            .map(|(c, (xs, accs))| {
                let lanes = this.lanes(c);
                let mut x = xs[j * lanes * dim..(j + 1) * lanes * dim].to_vec();
                let mut acc = accs[j * lanes..(j + 1) * lanes].to_vec();
                this.run_chunk(c, j, g, &mut x, &mut acc, Some((xs, accs)))
            })
            .collect();
        self.states = states;
        self.acc = accv;
        let (mean, stderr) = self.finish(parts)?;
        self.mean = mean;
        self.stderr = stderr;
        Ok(self.value())
    }

    /// Commit a whole scenario (block values).
    pub fn reset(&mut self, gamma: &[f64]) -> Result<f64, ScenarioError> {
        debug_assert_eq!(gamma.len(), self.blocks);
        self.gamma.copy_from_slice(gamma);
        self.commit(0, gamma[0])
    }
}
