//! Local-linear kernel smoothing (Epanechnikov) in one and two dimensions.
//!
//! Observations are first binned onto the cells of the working grid. A bin
//! keeps its count, mean location, sum and sum of squares, which is all the
//! local-linear fit and the GCV score need.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Number of log-spaced candidates scanned by GCV.
pub const GCV_CANDIDATES: usize = 10;

/// Observations used when a window holds too little data for a local line.
const NEAREST_FALLBACK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Bandwidth {
    #[default]
    Auto,
    Fixed(f64),
}

impl Bandwidth {
    fn validate(self) -> Result<Self> {
        match self {
            Bandwidth::Fixed(h) if !(h.is_finite() && h > 0.0) => {
                Err(Error::Config(format!("bandwidth must be positive, got {h}")))
            }
            b => Ok(b),
        }
    }
}

#[inline]
fn epan(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Log-spaced bandwidth candidates on `[2 dt, span / 2]`.
pub(crate) fn candidates(grid: &TimeGrid) -> Vec<f64> {
    let lo = 2.0 * grid.dt();
    let hi = (0.5 * grid.span()).max(lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..GCV_CANDIDATES)
        .map(|i| (a + (b - a) * i as f64 / (GCV_CANDIDATES - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Default)]
struct Bin {
    count: f64,
    loc_sum: [f64; 2],
    sum: f64,
    sumsq: f64,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    idx: [usize; 2],
    loc: [f64; 2],
    count: f64,
    mean: f64,
    sumsq: f64,
}

impl Cell {
    /// Within-bin sum of squares around a fitted value `f`.
    fn rss(&self, f: f64) -> f64 {
        let s = self.mean * self.count;
        (self.sumsq - 2.0 * f * s + self.count * f * f).max(0.0)
    }
}

/// Binned scatter `(t, y)` in one dimension.
#[derive(Debug, Clone)]
pub(crate) struct Binned1 {
    cells: Vec<Cell>,
    n_obs: f64,
}

impl Binned1 {
    pub(crate) fn from_points(grid: &TimeGrid, points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut bins = vec![Bin::default(); grid.len()];
        for (t, y) in points {
            let b = &mut bins[grid.nearest_index(t)];
            b.count += 1.0;
            b.loc_sum[0] += t;
            b.sum += y;
            b.sumsq += y * y;
        }
        let mut out = Self {
            cells: Vec::new(),
            n_obs: 0.0,
        };
        for (i, b) in bins.into_iter().enumerate() {
            if b.count > 0.0 {
                out.n_obs += b.count;
                out.cells.push(Cell {
                    idx: [i, 0],
                    loc: [b.loc_sum[0] / b.count, 0.0],
                    count: b.count,
                    mean: b.sum / b.count,
                    sumsq: b.sumsq,
                });
            }
        }
        out
    }

    fn distinct_locations(&self) -> usize {
        self.cells.len()
    }

    /// Local-linear fit at `t0`; returns the fitted value and the weight an
    /// observation located at `own` would receive (its hat value).
    fn fit_at(&self, t0: f64, h: f64, own: Option<f64>) -> Option<(f64, f64)> {
        let (mut s0, mut s1, mut s2, mut t0s, mut t1s) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for c in &self.cells {
            let d = (c.loc[0] - t0) / h;
            let k = epan(d);
            if k == 0.0 {
                continue;
            }
            let w = k * c.count;
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0s += w * c.mean;
            t1s += w * d * c.mean;
        }
        let det = s0 * s2 - s1 * s1;
        if s0 <= 0.0 || det <= 1e-10 * s0 * s2 {
            return None;
        }
        let value = (s2 * t0s - s1 * t1s) / det;
        let hat = own.map_or(0.0, |o| {
            let d = (o - t0) / h;
            epan(d) * (s2 - s1 * d) / det
        });
        Some((value, hat))
    }

    fn nearest_bandwidth(&self, t0: f64) -> f64 {
        let mut d: Vec<(f64, f64)> = self
            .cells
            .iter()
            .map(|c| ((c.loc[0] - t0).abs(), c.count))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut seen = 0.0;
        let mut reach = 0.0;
        for (k, (dist, count)) in d.iter().enumerate() {
            seen += count;
            reach = *dist;
            if seen >= NEAREST_FALLBACK as f64 && k >= 1 {
                break;
            }
        }
        1.5 * reach.max(f64::MIN_POSITIVE)
    }

    fn fit_robust(&self, t0: f64, h: f64, own: Option<f64>, widened: &mut usize) -> (f64, f64) {
        if let Some(r) = self.fit_at(t0, h, own) {
            return r;
        }
        *widened += 1;
        let mut hw = self.nearest_bandwidth(t0).max(h);
        for _ in 0..60 {
            if let Some(r) = self.fit_at(t0, hw, own) {
                return r;
            }
            hw *= 1.5;
        }
        // every observation shares one location: local constant
        let n: f64 = self.cells.iter().map(|c| c.count).sum();
        let m = self.cells.iter().map(|c| c.mean * c.count).sum::<f64>() / n;
        (m, 1.0 / n)
    }

    fn gcv(&self, h: f64) -> f64 {
        let mut rss = 0.0;
        let mut trace = 0.0;
        let mut widened = 0;
        for c in &self.cells {
            let (f, hat) = self.fit_robust(c.loc[0], h, Some(c.loc[0]), &mut widened);
            rss += c.rss(f);
            trace += c.count * hat;
        }
        gcv_score(rss, trace, self.n_obs)
    }

    fn evaluate(&self, grid: &TimeGrid, h: f64, what: &str) -> Vec<f64> {
        let mut widened = 0;
        let out = grid
            .points()
            .iter()
            .map(|&t| self.fit_robust(t, h, None, &mut widened).0)
            .collect();
        if widened > 0 {
            warn!("{what}: widened the smoothing window at {widened} grid points to the nearest observations");
        }
        out
    }

    /// Smooth onto `grid`. Returns the curve and the bandwidth used.
    pub(crate) fn smooth(&self, grid: &TimeGrid, bw: Bandwidth, what: &str) -> Result<(Vec<f64>, f64)> {
        if self.distinct_locations() < 2 {
            return Err(Error::Data(format!(
                "{what}: need at least two distinct timepoints to smooth"
            )));
        }
        let h = match bw.validate()? {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => select(&candidates(grid), |h| self.gcv(h)),
        };
        Ok((self.evaluate(grid, h, what), h))
    }
}

fn gcv_score(rss: f64, trace: f64, n: f64) -> f64 {
    let r = 1.0 - trace / n;
    if r <= 1e-8 {
        return f64::INFINITY;
    }
    (rss / n) / (r * r)
}

fn select(candidates: &[f64], score: impl Fn(f64) -> f64) -> f64 {
    let mut best = (f64::INFINITY, candidates[candidates.len() - 1]);
    for &h in candidates {
        let s = score(h);
        if s < best.0 {
            best = (s, h);
        }
    }
    best.1
}

/// Binned scatter `((s, t), y)` for surface smoothing. Cells are indexed on
/// the grid-by-grid lattice.
#[derive(Debug, Clone)]
pub(crate) struct Binned2 {
    cells: Vec<Cell>,
    // cell index per lattice bin, row-major, usize::MAX when empty
    lookup: Vec<usize>,
    n_grid: usize,
    n_obs: f64,
    symmetric: bool,
}

impl Binned2 {
    /// `symmetric` declares that the scatter contains both `(s, t)` and
    /// `(t, s)` for every pair, so fits can be mirrored.
    pub(crate) fn from_points(
        grid: &TimeGrid,
        points: impl Iterator<Item = (f64, f64, f64)>,
        symmetric: bool,
    ) -> Self {
        let m = grid.len();
        let mut bins = vec![Bin::default(); m * m];
        for (s, t, y) in points {
            let b = &mut bins[grid.nearest_index(s) * m + grid.nearest_index(t)];
            b.count += 1.0;
            b.loc_sum[0] += s;
            b.loc_sum[1] += t;
            b.sum += y;
            b.sumsq += y * y;
        }
        let mut cells = Vec::new();
        let mut lookup = vec![usize::MAX; m * m];
        let mut n_obs = 0.0;
        for (k, b) in bins.into_iter().enumerate() {
            if b.count > 0.0 {
                lookup[k] = cells.len();
                n_obs += b.count;
                cells.push(Cell {
                    idx: [k / m, k % m],
                    loc: [b.loc_sum[0] / b.count, b.loc_sum[1] / b.count],
                    count: b.count,
                    mean: b.sum / b.count,
                    sumsq: b.sumsq,
                });
            }
        }
        Self {
            cells,
            lookup,
            n_grid: m,
            n_obs,
            symmetric,
        }
    }

    fn fit_at(&self, p: [f64; 2], h: f64, dt: f64, own: Option<[f64; 2]>) -> Option<(f64, f64)> {
        // only lattice bins within reach of the window can contribute
        let r = (h / dt).ceil() as isize + 1;
        let m = self.n_grid as isize;
        let ci = (p[0] / dt).round() as isize;
        let cj = (p[1] / dt).round() as isize;
        let mut a = [[0.0f64; 3]; 3];
        let mut rhs = [0.0f64; 3];
        for i in (ci - r).max(0)..=(ci + r).min(m - 1) {
            for j in (cj - r).max(0)..=(cj + r).min(m - 1) {
                let k = self.lookup[(i * m + j) as usize];
                if k == usize::MAX {
                    continue;
                }
                let c = &self.cells[k];
                let u = (c.loc[0] - p[0]) / h;
                let v = (c.loc[1] - p[1]) / h;
                let kw = epan(u) * epan(v);
                if kw == 0.0 {
                    continue;
                }
                let w = kw * c.count;
                let x = [1.0, u, v];
                for (r0, x0) in x.iter().enumerate() {
                    rhs[r0] += w * x0 * c.mean;
                    for (r1, x1) in x.iter().enumerate().skip(r0) {
                        a[r0][r1] += w * x0 * x1;
                    }
                }
            }
        }
        for r0 in 0..3 {
            for r1 in 0..r0 {
                a[r0][r1] = a[r1][r0];
            }
        }
        let s0 = a[0][0];
        if s0 <= 0.0 {
            return None;
        }
        let inv = inv3(&a, 1e-10 * s0 * a[1][1] * a[2][2])?;
        let value: f64 = (0..3).map(|c| inv[0][c] * rhs[c]).sum();
        let hat = own.map_or(0.0, |o| {
            let u = (o[0] - p[0]) / h;
            let v = (o[1] - p[1]) / h;
            let x = [1.0, u, v];
            let l: f64 = (0..3).map(|c| inv[0][c] * x[c]).sum();
            epan(u) * epan(v) * l
        });
        Some((value, hat))
    }

    fn nearest_bandwidth(&self, p: [f64; 2]) -> f64 {
        let mut d: Vec<(f64, f64)> = self
            .cells
            .iter()
            .map(|c| ((c.loc[0] - p[0]).abs().max((c.loc[1] - p[1]).abs()), c.count))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut seen = 0.0;
        let mut reach = 0.0;
        for (k, (dist, count)) in d.iter().enumerate() {
            seen += count;
            reach = *dist;
            if seen >= NEAREST_FALLBACK as f64 && k + 1 >= 3 {
                break;
            }
        }
        1.5 * reach.max(f64::MIN_POSITIVE)
    }

    fn fit_robust(
        &self,
        p: [f64; 2],
        h: f64,
        dt: f64,
        own: Option<[f64; 2]>,
        widened: &mut usize,
    ) -> (f64, f64) {
        if let Some(r) = self.fit_at(p, h, dt, own) {
            return r;
        }
        *widened += 1;
        let mut hw = self.nearest_bandwidth(p).max(h);
        for _ in 0..60 {
            if let Some(r) = self.fit_at(p, hw, dt, own) {
                return r;
            }
            hw *= 1.5;
        }
        let n: f64 = self.cells.iter().map(|c| c.count).sum();
        let m = self.cells.iter().map(|c| c.mean * c.count).sum::<f64>() / n;
        (m, 1.0 / n)
    }

    fn evaluate(&self, grid: &TimeGrid, h: f64, what: &str) -> Vec<Vec<f64>> {
        let m = grid.len();
        let dt = grid.dt();
        let pts: Vec<f64> = grid.points().iter().map(|t| t - grid.t_min()).collect();
        let mut out = vec![vec![0.0; m]; m];
        let mut widened = 0;
        for i in 0..m {
            let start = if self.symmetric { i } else { 0 };
            for j in start..m {
                let v = self.fit_robust([pts[i], pts[j]], h, dt, None, &mut widened).0;
                out[i][j] = v;
                if self.symmetric {
                    out[j][i] = v;
                }
            }
        }
        if widened > 0 {
            warn!("{what}: widened the smoothing window at {widened} grid points to the nearest observations");
        }
        out
    }

    /// Smooth onto the `grid × grid` lattice. Returns the surface (row `i`
    /// holds `s = points[i]`) and the bandwidth used.
    pub(crate) fn smooth(
        &self,
        grid: &TimeGrid,
        bw: Bandwidth,
        what: &str,
    ) -> Result<(Vec<Vec<f64>>, f64)> {
        if self.cells.len() < 3 {
            return Err(Error::Data(format!("{what}: too few distinct locations to smooth")));
        }
        let shifted = self.shifted(grid.t_min());
        let h = match bw.validate()? {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => select(&candidates(grid), |h| shifted.gcv_origin(grid, h)),
        };
        Ok((shifted.evaluate(grid, h, what), h))
    }

    // Locations relative to t_min so lattice indices follow from division by dt.
    fn shifted(&self, t0: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.cells {
            c.loc[0] -= t0;
            c.loc[1] -= t0;
        }
        out
    }

    fn gcv_origin(&self, grid: &TimeGrid, h: f64) -> f64 {
        let dt = grid.dt();
        let mut rss = 0.0;
        let mut trace = 0.0;
        let mut widened = 0;
        for c in &self.cells {
            let mult = if self.symmetric {
                match c.idx[0].cmp(&c.idx[1]) {
                    std::cmp::Ordering::Greater => continue,
                    std::cmp::Ordering::Equal => 1.0,
                    std::cmp::Ordering::Less => 2.0,
                }
            } else {
                1.0
            };
            let (f, hat) = self.fit_robust(c.loc, h, dt, Some(c.loc), &mut widened);
            rss += mult * c.rss(f);
            trace += mult * c.count * hat;
        }
        gcv_score(rss, trace, self.n_obs)
    }
}

/// Inverse of a symmetric 3×3 matrix; `None` when the determinant is below `tol`.
fn inv3(a: &[[f64; 3]; 3], tol: f64) -> Option<[[f64; 3]; 3]> {
    let c00 = a[1][1] * a[2][2] - a[1][2] * a[2][1];
    let c01 = a[1][2] * a[2][0] - a[1][0] * a[2][2];
    let c02 = a[1][0] * a[2][1] - a[1][1] * a[2][0];
    let det = a[0][0] * c00 + a[0][1] * c01 + a[0][2] * c02;
    if !(det > tol) {
        return None;
    }
    let c11 = a[0][0] * a[2][2] - a[0][2] * a[2][0];
    let c12 = a[0][2] * a[1][0] - a[0][0] * a[1][2];
    let c22 = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [c00 / det, c01 / det, c02 / det],
        [c01 / det, c11 / det, c12 / det],
        [c02 / det, c12 / det, c22 / det],
    ];
    Some(inv)
}
