//! Equally spaced time grid and the composite trapezoid quadrature used for
//! every integral over the observation window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of grid points accepted by [`TimeGrid::new`].
pub const MIN_GRID_POINTS: usize = 11;

/// Default resolution of the working grid.
pub const DEFAULT_GRID_POINTS: usize = 51;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_min: f64,
    t_max: f64,
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t_min: f64, t_max: f64, n_points: usize) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite()) || t_max <= t_min {
            return Err(Error::Config(format!(
                "time window [{t_min}, {t_max}] is empty or not finite"
            )));
        }
        if n_points < MIN_GRID_POINTS {
            return Err(Error::Config(format!(
                "time grid needs at least {MIN_GRID_POINTS} points, got {n_points}"
            )));
        }
        let dt = (t_max - t_min) / (n_points - 1) as f64;
        let mut points: Vec<f64> = (0..n_points).map(|i| t_min + i as f64 * dt).collect();
        // pin the right endpoint exactly
        points[n_points - 1] = t_max;
        Ok(Self {
            t_min,
            t_max,
            points,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.span() / (self.len() - 1) as f64
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Trapezoid weights: `dt` in the interior and `dt / 2` at both ends.
    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(self.len(), self.dt())
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        trapezoid(values, self.dt())
    }

    /// Trapezoid inner product `<f, g>`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.len());
        debug_assert_eq!(g.len(), self.len());
        let dt = self.dt();
        let n = f.len();
        let interior: f64 = (1..n - 1).map(|i| f[i] * g[i]).sum();
        dt * (interior + 0.5 * (f[0] * g[0] + f[n - 1] * g[n - 1]))
    }

    /// Linear interpolation of grid values at `t`; clamps outside the window.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        interp_uniform(self.t_min, self.dt(), values, t)
    }

    /// Index of the grid point closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let idx = ((t - self.t_min) / self.dt()).round();
        (idx.max(0.0) as usize).min(self.len() - 1)
    }
}

pub(crate) fn trapezoid_weights(n: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; n];
    if n > 0 {
        w[0] = 0.5 * dt;
        w[n - 1] = 0.5 * dt;
    }
    w
}

pub(crate) fn trapezoid(values: &[f64], dt: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..n - 1].iter().sum();
    dt * (interior + 0.5 * (values[0] + values[n - 1]))
}

/// Linear interpolation on a uniform grid starting at `start` with spacing `dt`.
pub(crate) fn interp_uniform(start: f64, dt: f64, values: &[f64], t: f64) -> f64 {
    let n = values.len();
    let pos = (t - start) / dt;
    if pos <= 0.0 {
        return values[0];
    }
    let i = pos.floor() as usize;
    if i >= n - 1 {
        return values[n - 1];
    }
    let frac = pos - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}
