//! The LQ state equation and cost in the form used by the scenario engine.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Feedback, LqProblem};
use crate::scenario::{ControlledSde, LinearDriver};

/// `v(t, x) = a·sin(ωt + φ) + s(Gx)` componentwise with `s(z) = z/(1+|z|)`, bounded by `|a| + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedFeedback {
    pub amp: DVector<f64>,
    pub freq: f64,
    pub phase: f64,
    pub slope: DMatrix<f64>,
}

impl BoundedFeedback {
    pub fn random(n: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = std::f64::consts::TAU;
        Self {
            amp: DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)),
            freq: rng.gen_range(0.0..tau),
            phase: rng.gen_range(0.0..tau),
            slope: DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    fn add_to(&self, t: f64, scale: f64, x: &[f64], u: &mut [f64]) {
        let wave = (self.freq * t + self.phase).sin();
        for (i, ui) in u.iter_mut().enumerate() {
            let gx: f64 = x.iter().enumerate().map(|(j, xj)| self.slope[(i, j)] * xj).sum();
            *ui += scale * (self.amp[i] * wave + softsign(gx));
        }
    }
}

#[inline]
fn softsign(z: f64) -> f64 {
    z / (1.0 + z.abs())
}

/// Shared plant data: coefficients per step and the feedback per node.
struct Plant<'a> {
    prob: &'a LqProblem,
    fb: &'a Feedback,
    n: usize,
    m: usize,
}

impl Plant<'_> {
    fn control(&self, k: usize, x: &[f64], u: &mut [f64]) {
        let (g, o) = (&self.fb.gain[k], &self.fb.offset[k]);
        for i in 0..self.m {
            u[i] = o[i] + (0..self.n).map(|j| g[(i, j)] * x[j]).sum::<f64>();
        }
    }

    /// Drift and volatility of `dX = (AX + Bu + b)dt + (CX + Du + σ)dB`.
    fn coefficients(&self, k: usize, x: &[f64], u: &[f64], b: &mut [f64], s: &mut [f64]) {
        let c = self.prob.coefs(k);
        for i in 0..self.n {
            let mut bi = c.drift[i];
            let mut si = c.sigma[i];
            for j in 0..self.n {
                bi += c.a[(i, j)] * x[j];
                si += c.c[(i, j)] * x[j];
            }
            for j in 0..self.m {
                bi += c.b[(i, j)] * u[j];
                si += c.d[(i, j)] * u[j];
            }
            b[i] = bi;
            s[i] = si;
        }
    }

    /// `½[xᵀQx + 2⟨Sx, u⟩ + uᵀRu]`.
    fn running(&self, k: usize, x: &[f64], u: &[f64]) -> f64 {
        let c = self.prob.coefs(k);
        let mut v = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                v += x[i] * c.q[(i, j)] * x[j];
            }
        }
        for i in 0..self.m {
            let sx: f64 = (0..self.n).map(|j| c.s[(i, j)] * x[j]).sum();
            v += 2.0 * sx * u[i];
            for j in 0..self.m {
                v += u[i] * c.r[(i, j)] * u[j];
            }
        }
        0.5 * v
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        let l = self.prob.terminal();
        let mut v = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                v += x[i] * l[(i, j)] * x[j];
            }
        }
        0.5 * v
    }
}

/// Scalar coefficients on step `k`: `(a, b, drift, c, d, σ, q, s, r, K, k)`.
fn scalar_data(p: &Plant, k: usize) -> [f64; 11] {
    let c = p.prob.coefs(k);
    [
        c.a[(0, 0)],
        c.b[(0, 0)],
        c.drift[0],
        c.c[(0, 0)],
        c.d[(0, 0)],
        c.sigma[0],
        c.q[(0, 0)],
        c.s[(0, 0)],
        c.r[(0, 0)],
        p.fb.gain[k][(0, 0)],
        p.fb.offset[k][0],
    ]
}

/// The optimal feedback, optionally perturbed to `u* + ε·v(t, x)`.
pub struct ClosedLoop<'a> {
    plant: Plant<'a>,
    perturbation: Option<(f64, BoundedFeedback)>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(prob: &'a LqProblem, fb: &'a Feedback) -> Self {
        Self { plant: Plant { prob, fb, n: prob.n(), m: prob.m() }, perturbation: None }
    }

    pub fn perturbed(prob: &'a LqProblem, fb: &'a Feedback, eps: f64, v: BoundedFeedback) -> Self {
        Self { perturbation: Some((eps, v)), ..Self::new(prob, fb) }
    }

    fn control(&self, k: usize, x: &[f64], u: &mut [f64]) {
        self.plant.control(k, x, u);
        if let Some((eps, v)) = &self.perturbation {
            v.add_to(self.plant.prob.grid().time(k), *eps, x, u);
        }
    }

    fn scalar(&self) -> bool {
        self.plant.n == 1 && self.plant.m == 1
    }
}

impl ControlledSde for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.plant.n
    }

    fn initial_state(&self, x: &mut [f64]) {
        x.copy_from_slice(self.plant.prob.x0().as_slice());
    }

    fn coefficients(&self, k: usize, x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]) {
        let mut u = vec![0.0; self.plant.m];
        self.control(k, x, &mut u);
        self.plant.coefficients(k, x, &u, b, sigma);
        h.fill(0.0);
    }

    fn step_chunk(&self, k: usize, dt: f64, _gamma: f64, x: &mut [f64], dw: &[f64]) {
        if !self.scalar() {
            let lanes = dw.len();
            let (n, m) = (self.plant.n, self.plant.m);
            let (mut xl, mut u, mut b, mut s) = (vec![0.0; n], vec![0.0; m], vec![0.0; n], vec![0.0; n]);
            for lane in 0..lanes {
                for i in 0..n {
                    xl[i] = x[i * lanes + lane];
                }
                self.control(k, &xl, &mut u);
                self.plant.coefficients(k, &xl, &u, &mut b, &mut s);
                for i in 0..n {
                    x[i * lanes + lane] += b[i] * dt + s[i] * dw[lane];
                }
            }
            return;
        }
        let [a, bb, drift, c, d, sigma, _, _, _, gk, ok] = scalar_data(&self.plant, k);
        match &self.perturbation {
            None => {
                for (x, w) in x.iter_mut().zip(dw) {
                    let u = gk * *x + ok;
                    *x += (a * *x + bb * u + drift) * dt + (c * *x + d * u + sigma) * w;
                }
            }
            Some((eps, v)) => {
                let t = self.plant.prob.grid().time(k);
                let wave = v.amp[0] * (v.freq * t + v.phase).sin();
                let g = v.slope[(0, 0)];
                for (x, w) in x.iter_mut().zip(dw) {
                    let u = gk * *x + ok + eps * (wave + softsign(g * *x));
                    *x += (a * *x + bb * u + drift) * dt + (c * *x + d * u + sigma) * w;
                }
            }
        }
    }
}

impl LinearDriver for ClosedLoop<'_> {
    fn discount(&self, k: usize) -> f64 {
        self.plant.prob.coefs(k).e
    }

    fn running(&self, k: usize, x: &[f64]) -> (f64, f64) {
        let mut u = vec![0.0; self.plant.m];
        self.control(k, x, &mut u);
        (self.plant.running(k, x, &u), 0.0)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        self.plant.terminal(x)
    }

    fn accumulate_chunk(&self, k: usize, _gamma: f64, weight: f64, x: &[f64], acc: &mut [f64]) {
        if !self.scalar() {
            let lanes = acc.len();
            let n = self.plant.n;
            let mut xl = vec![0.0; n];
            let mut u = vec![0.0; self.plant.m];
            for lane in 0..lanes {
                for i in 0..n {
                    xl[i] = x[i * lanes + lane];
                }
                self.control(k, &xl, &mut u);
                acc[lane] += weight * self.plant.running(k, &xl, &u);
            }
            return;
        }
        let [_, _, _, _, _, _, q, s, r, gk, ok] = scalar_data(&self.plant, k);
        let pert = self.perturbation.as_ref().map(|(eps, v)| {
            let t = self.plant.prob.grid().time(k);
            (*eps, v.amp[0] * (v.freq * t + v.phase).sin(), v.slope[(0, 0)])
        });
        for (a, x) in acc.iter_mut().zip(x) {
            let mut u = gk * x + ok;
            if let Some((eps, wave, g)) = pert {
                u += eps * (wave + softsign(g * x));
            }
            *a += weight * 0.5 * (q * x * x + 2.0 * s * x * u + r * u * u);
        }
    }

    fn terminal_chunk(&self, weight: f64, x: &[f64], acc: &mut [f64]) {
        if !self.scalar() {
            let lanes = acc.len();
            let n = self.plant.n;
            let mut xl = vec![0.0; n];
            for lane in 0..lanes {
                for i in 0..n {
                    xl[i] = x[i * lanes + lane];
                }
                acc[lane] += weight * self.plant.terminal(&xl);
            }
            return;
        }
        let l = self.plant.prob.terminal()[(0, 0)];
        for (a, x) in acc.iter_mut().zip(x) {
            *a += weight * 0.5 * l * x * x;
        }
    }
}

/// Open-loop perturbation: `X*` runs under `u*`, `X^ε` under the process `u*_t + ε·shift`.
/// The state is `(X*, X^ε)` and the cost is charged on `X^ε`.
pub struct ShadowPair<'a> {
    plant: Plant<'a>,
    eps: f64,
    shift: DVector<f64>,
}

impl<'a> ShadowPair<'a> {
    pub fn new(prob: &'a LqProblem, fb: &'a Feedback, eps: f64, shift: DVector<f64>) -> Self {
        Self { plant: Plant { prob, fb, n: prob.n(), m: prob.m() }, eps, shift }
    }

    fn controls(&self, k: usize, xs: &[f64], u_star: &mut [f64], u_eps: &mut [f64]) {
        self.plant.control(k, xs, u_star);
        for i in 0..self.plant.m {
            u_eps[i] = u_star[i] + self.eps * self.shift[i];
        }
    }
}

impl ControlledSde for ShadowPair<'_> {
    fn dim(&self) -> usize {
        2 * self.plant.n
    }

    fn initial_state(&self, x: &mut [f64]) {
        let x0 = self.plant.prob.x0().as_slice();
        x[..x0.len()].copy_from_slice(x0);
        x[x0.len()..].copy_from_slice(x0);
    }

    fn coefficients(&self, k: usize, x: &[f64], b: &mut [f64], h: &mut [f64], sigma: &mut [f64]) {
        let (n, m) = (self.plant.n, self.plant.m);
        let (mut us, mut ue) = (vec![0.0; m], vec![0.0; m]);
        self.controls(k, &x[..n], &mut us, &mut ue);
        let (b1, b2) = b.split_at_mut(n);
        let (s1, s2) = sigma.split_at_mut(n);
        self.plant.coefficients(k, &x[..n], &us, b1, s1);
        self.plant.coefficients(k, &x[n..], &ue, b2, s2);
        h.fill(0.0);
    }

    fn step_chunk(&self, k: usize, dt: f64, _gamma: f64, x: &mut [f64], dw: &[f64]) {
        if self.plant.n != 1 || self.plant.m != 1 {
            let lanes = dw.len();
            let (n, m) = (self.plant.n, self.plant.m);
            let (mut xs, mut xe) = (vec![0.0; n], vec![0.0; n]);
            let (mut us, mut ue) = (vec![0.0; m], vec![0.0; m]);
            let (mut b, mut s) = (vec![0.0; n], vec![0.0; n]);
            for lane in 0..lanes {
                for i in 0..n {
                    xs[i] = x[i * lanes + lane];
                    xe[i] = x[(n + i) * lanes + lane];
                }
                self.controls(k, &xs, &mut us, &mut ue);
                self.plant.coefficients(k, &xs, &us, &mut b, &mut s);
                for i in 0..n {
                    x[i * lanes + lane] += b[i] * dt + s[i] * dw[lane];
                }
                self.plant.coefficients(k, &xe, &ue, &mut b, &mut s);
                for i in 0..n {
                    x[(n + i) * lanes + lane] += b[i] * dt + s[i] * dw[lane];
                }
            }
            return;
        }
        let [a, bb, drift, c, d, sigma, _, _, _, gk, ok] = scalar_data(&self.plant, k);
        let lanes = dw.len();
        let shift = self.eps * self.shift[0];
        let (xs, xe) = x.split_at_mut(lanes);
        for ((xs, xe), w) in xs.iter_mut().zip(xe.iter_mut()).zip(dw) {
            let us = gk * *xs + ok;
            let ue = us + shift;
            *xs += (a * *xs + bb * us + drift) * dt + (c * *xs + d * us + sigma) * w;
            *xe += (a * *xe + bb * ue + drift) * dt + (c * *xe + d * ue + sigma) * w;
        }
    }
}

impl LinearDriver for ShadowPair<'_> {
    fn discount(&self, k: usize) -> f64 {
        self.plant.prob.coefs(k).e
    }

    fn running(&self, k: usize, x: &[f64]) -> (f64, f64) {
        let (n, m) = (self.plant.n, self.plant.m);
        let (mut us, mut ue) = (vec![0.0; m], vec![0.0; m]);
        self.controls(k, &x[..n], &mut us, &mut ue);
        (self.plant.running(k, &x[n..], &ue), 0.0)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        self.plant.terminal(&x[self.plant.n..])
    }

    fn accumulate_chunk(&self, k: usize, _gamma: f64, weight: f64, x: &[f64], acc: &mut [f64]) {
        let lanes = acc.len();
        let (n, m) = (self.plant.n, self.plant.m);
        if n == 1 && m == 1 {
            let [_, _, _, _, _, _, q, s, r, gk, ok] = scalar_data(&self.plant, k);
            let shift = self.eps * self.shift[0];
            let (xs, xe) = x.split_at(lanes);
            for ((a, xs), xe) in acc.iter_mut().zip(xs).zip(xe) {
                let u = gk * xs + ok + shift;
                *a += weight * 0.5 * (q * xe * xe + 2.0 * s * xe * u + r * u * u);
            }
            return;
        }
        let (mut xs, mut xe) = (vec![0.0; n], vec![0.0; n]);
        let (mut us, mut ue) = (vec![0.0; m], vec![0.0; m]);
        for lane in 0..lanes {
            for i in 0..n {
                xs[i] = x[i * lanes + lane];
                xe[i] = x[(n + i) * lanes + lane];
            }
            self.controls(k, &xs, &mut us, &mut ue);
            acc[lane] += weight * self.plant.running(k, &xe, &ue);
        }
    }

    fn terminal_chunk(&self, weight: f64, x: &[f64], acc: &mut [f64]) {
        let lanes = acc.len();
        let n = self.plant.n;
        let mut xe = vec![0.0; n];
        for lane in 0..lanes {
            for i in 0..n {
                xe[i] = x[(n + i) * lanes + lane];
            }
            acc[lane] += weight * self.plant.terminal(&xe);
        }
    }
}
