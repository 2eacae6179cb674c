//! Backward RK4 on a uniform substep grid with cubic Hermite dense output.

use nalgebra::DMatrix;

use super::LqError;
use crate::gcore::TimeGrid;

/// Solution on the substep grid with `dy/dt` at both ends of every substep.
///
/// The coefficients jump at grid nodes, so each substep keeps its own one-sided derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePath {
    grid: TimeGrid,
    substeps: usize,
    h: f64,
    vals: Vec<DMatrix<f64>>,
    d_left: Vec<DMatrix<f64>>,
    d_right: Vec<DMatrix<f64>>,
}

impl DensePath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Value at grid node `k`.
    pub fn node(&self, k: usize) -> DMatrix<f64> {
        self.vals[k * self.substeps].clone()
    }

    /// Value on substep `i` at relative position `theta ∈ [0, 1]`.
    pub fn at_fine(&self, i: usize, theta: f64) -> DMatrix<f64> {
        if theta == 0.0 {
            return self.vals[i].clone();
        }
        if theta == 1.0 {
            return self.vals[i + 1].clone();
        }
        let (s, s2, s3) = (theta, theta * theta, theta * theta * theta);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * &self.vals[i] + (h10 * self.h) * &self.d_left[i] + h01 * &self.vals[i + 1] + (h11 * self.h) * &self.d_right[i]
    }

    /// Value at time `t`; at a grid node the substep to the right is used.
    pub fn at_time(&self, t: f64) -> DMatrix<f64> {
        let nf = self.d_left.len();
        let pos = (t / self.h).clamp(0.0, nf as f64);
        let i = (pos.floor() as usize).min(nf - 1);
        let theta = pos - i as f64;
        if theta.abs() < 1e-12 {
            return self.vals[i].clone();
        }
        if (1.0 - theta).abs() < 1e-12 {
            return self.vals[i + 1].clone();
        }
        self.at_fine(i, theta)
    }

    /// `max |y|` over all entries and substep nodes.
    pub fn sup_norm(&self) -> f64 {
        self.vals.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }

    /// `max |y − z|` over grid nodes.
    pub fn max_diff(&self, other: &DensePath) -> f64 {
        (0..=self.grid.steps()).map(|k| (self.node(k) - other.node(k)).amax()).fold(0.0, f64::max)
    }
}

/// Integrate from `T` down to `0` with `rhs(k, i, theta, t, y) = dy/dτ`, `τ = T − t`,
/// where `k` is the grid interval and `i` the substep.
pub(crate) fn integrate_backward(
    grid: &TimeGrid,
    substeps: usize,
    terminal: DMatrix<f64>,
    symmetrize: bool,
    bound: f64,
    mut rhs: impl FnMut(usize, usize, f64, f64, &DMatrix<f64>) -> Result<DMatrix<f64>, LqError>,
) -> Result<DensePath, LqError> {
    let s = substeps.max(1);
    let nf = grid.steps() * s;
    let h = grid.dt() / s as f64;
    let mut vals = vec![DMatrix::zeros(0, 0); nf + 1];
    let mut d_left = vec![DMatrix::zeros(0, 0); nf];
    let mut d_right = vec![DMatrix::zeros(0, 0); nf];
    vals[nf] = terminal;
    let mut carried: Option<DMatrix<f64>> = None;
    for i in (0..nf).rev() {
        let k = i / s;
        let t1 = (i + 1) as f64 * h;
        let t0 = i as f64 * h;
        let y1 = &vals[i + 1];
        let k1 = match carried.take() {
            Some(f) => f,
            None => rhs(k, i, 1.0, t1, y1)?,
        };
        let k2 = rhs(k, i, 0.5, t1 - 0.5 * h, &(y1 + (0.5 * h) * &k1))?;
        let k3 = rhs(k, i, 0.5, t1 - 0.5 * h, &(y1 + (0.5 * h) * &k2))?;
        let k4 = rhs(k, i, 0.0, t0, &(y1 + h * &k3))?;
        let mut y0 = y1 + (h / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);
        if symmetrize {
            y0 = 0.5 * (&y0 + y0.transpose());
        }
        let norm = y0.amax();
        if !norm.is_finite() || norm > bound {
            return Err(LqError::BlowUp { t: t0, norm });
        }
        let f0 = rhs(k, i, 0.0, t0, &y0)?;
        d_right[i] = -k1;
        d_left[i] = -&f0;
        vals[i] = y0;
        // the next substep starts here; its slope is reusable inside the same interval
        if i > 0 && (i - 1) / s == k {
            carried = Some(f0);
        }
    }
    Ok(DensePath { grid: *grid, substeps: s, h, vals, d_left, d_right })
}
