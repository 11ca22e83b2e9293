//! Sparse functional principal component analysis by conditional expectation.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::longdata::LongitudinalExposure;
use crate::smooth::{Bandwidth, Binned1, Binned2};

/// Minimum number of subjects with two or more measurements needed for the
/// covariance surface.
pub const MIN_PAIRED_SUBJECTS: usize = 10;

/// Fraction of the window trimmed at each end when estimating `sigma2`.
const SIGMA2_TRIM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpcaOptions {
    pub fve_threshold: f64,
    pub mean_bandwidth: Bandwidth,
    pub cov_bandwidth: Bandwidth,
    /// Lower bound on the number of retained components, limited by the
    /// number of positive eigenvalues.
    pub min_components: Option<usize>,
    /// Upper bound on the number of retained components.
    pub max_components: Option<usize>,
}

impl Default for FpcaOptions {
    fn default() -> Self {
        Self {
            fve_threshold: 0.95,
            mean_bandwidth: Bandwidth::Auto,
            cov_bandwidth: Bandwidth::Auto,
            min_components: None,
            max_components: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub grid: TimeGrid,
    pub mu: Vec<f64>,
    /// One row per component, evaluated on `grid`.
    pub phi: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub sigma2: f64,
    /// Cumulative fraction of variance explained by the first `k` components.
    pub fve: Vec<f64>,
    pub subject_ids: Vec<String>,
    /// `n × K`, row order follows `subject_ids`.
    pub scores: DMatrix<f64>,
    pub mean_bandwidth: f64,
    pub cov_bandwidth: f64,
}

impl FpcaModel {
    pub fn n_components(&self) -> usize {
        self.lambda.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = crate::longdata::create_output(path)?;
        serde_json::to_writer(file, self)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let m = self.grid.len();
        let k = self.lambda.len();
        let ok = self.mu.len() == m
            && self.phi.len() == k
            && self.phi.iter().all(|p| p.len() == m)
            && self.fve.len() == k
            && self.scores.ncols() == k
            && self.scores.nrows() == self.subject_ids.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Data("FPCA model has inconsistent dimensions".into()))
        }
    }

    /// `φ_k(t)` by linear interpolation on the grid.
    pub fn phi_at(&self, k: usize, t: f64) -> f64 {
        self.grid.interpolate(&self.phi[k], t)
    }

    pub fn mu_at(&self, t: f64) -> f64 {
        self.grid.interpolate(&self.mu, t)
    }

    /// Largest `|<φ_j, φ_k> - δ_jk|` under trapezoid quadrature.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.phi.len() {
            for k in 0..self.phi.len() {
                let target = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((self.grid.inner(&self.phi[j], &self.phi[k]) - target).abs());
            }
        }
        worst
    }
}

/// Pooled local-linear mean curve.
pub fn estimate_mean(
    data: &LongitudinalExposure,
    grid: &TimeGrid,
    bandwidth: Bandwidth,
) -> Result<Vec<f64>> {
    Ok(mean_with_bandwidth(data, grid, bandwidth)?.0)
}

fn mean_with_bandwidth(
    data: &LongitudinalExposure,
    grid: &TimeGrid,
    bandwidth: Bandwidth,
) -> Result<(Vec<f64>, f64)> {
    let pts = data
        .subjects()
        .iter()
        .flat_map(|s| s.times.iter().copied().zip(s.values.iter().copied()));
    Binned1::from_points(grid, pts).smooth(grid, bandwidth, "mean curve")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovSurface {
    /// `m × m`, exactly symmetric; entry `(i, j)` is `cov(X(t_i), X(t_j))`.
    pub matrix: DMatrix<f64>,
    pub sigma2: f64,
    pub bandwidth: f64,
}

/// Smoothed covariance surface from within-subject cross-products, with the
/// measurement-error variance read off the diagonal.
pub fn estimate_cov_surface(
    data: &LongitudinalExposure,
    grid: &TimeGrid,
    mu: &[f64],
    bandwidth: Bandwidth,
) -> Result<CovSurface> {
    if mu.len() != grid.len() {
        return Err(Error::Config("mean curve does not match the grid".into()));
    }
    let paired = data.subjects().iter().filter(|s| s.len() >= 2).count();
    if paired < MIN_PAIRED_SUBJECTS {
        return Err(Error::Data(format!(
            "covariance is not identified: {paired} subjects have two or more measurements, \
             at least {MIN_PAIRED_SUBJECTS} are needed"
        )));
    }
    let resid: Vec<Vec<(f64, f64)>> = data
        .subjects()
        .iter()
        .map(|s| {
            s.times
                .iter()
                .zip(&s.values)
                .map(|(&t, &x)| (t, x - grid.interpolate(mu, t)))
                .collect()
        })
        .collect();

    let off = resid.iter().flat_map(|r| {
        r.iter().enumerate().flat_map(move |(j, &(tj, ej))| {
            r.iter()
                .enumerate()
                .filter(move |(l, _)| *l != j)
                .map(move |(_, &(tl, el))| (tj, tl, ej * el))
        })
    });
    let (surface, h) = Binned2::from_points(grid, off, true).smooth(grid, bandwidth, "covariance surface")?;
    let m = grid.len();
    let mut matrix = DMatrix::from_fn(m, m, |i, j| surface[i][j]);
    // exact symmetry regardless of evaluation order
    matrix = (&matrix + matrix.transpose()) * 0.5;

    let diag_pts = resid.iter().flat_map(|r| r.iter().map(|&(t, e)| (t, e * e)));
    let diag_bw = match bandwidth {
        Bandwidth::Fixed(_) => bandwidth,
        Bandwidth::Auto => Bandwidth::Auto,
    };
    let (var_curve, _) = Binned1::from_points(grid, diag_pts).smooth(grid, diag_bw, "variance curve")?;
    let lo = grid.t_min() + SIGMA2_TRIM * grid.span();
    let hi = grid.t_max() - SIGMA2_TRIM * grid.span();
    let band: Vec<f64> = grid
        .points()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= lo - 1e-12 && t <= hi + 1e-12)
        .map(|(i, _)| var_curve[i] - matrix[(i, i)])
        .collect();
    let sigma2 = (band.iter().sum::<f64>() / band.len() as f64).max(0.0);
    debug!("covariance bandwidth {h:.4}, sigma2 {sigma2:.6}");
    Ok(CovSurface {
        matrix,
        sigma2,
        bandwidth: h,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    /// All eigenfunctions with nonnegative eigenvalues, rows on the grid.
    pub phi: Vec<Vec<f64>>,
    /// Nonincreasing, truncated at zero.
    pub lambda: Vec<f64>,
    /// Cumulative FVE for every retained count.
    pub fve: Vec<f64>,
    /// Smallest count reaching the FVE threshold.
    pub k: usize,
}

/// Eigenpairs of the covariance operator under trapezoid quadrature.
pub fn eigendecompose(surface: &DMatrix<f64>, grid: &TimeGrid, fve_threshold: f64) -> Result<Eigen> {
    let m = grid.len();
    if surface.nrows() != m || surface.ncols() != m {
        return Err(Error::Config("covariance surface does not match the grid".into()));
    }
    if !(fve_threshold > 0.0 && fve_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "FVE threshold must lie in (0, 1], got {fve_threshold}"
        )));
    }
    let w = grid.weights();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(m, m, |i, j| sw[i] * surface[(i, j)] * sw[j]);
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("degenerate covariance".into()));
    }
    let n_pos = lambda.iter().take_while(|&&l| l > 0.0).count();
    let t_scale = 1e-8 * grid.span().sqrt();
    let mut phi = Vec::with_capacity(n_pos);
    for &i in order.iter().take(n_pos) {
        let v = eig.eigenvectors.column(i);
        let mut f: Vec<f64> = (0..m).map(|r| v[r] / sw[r]).collect();
        let integral = grid.integrate(&f);
        let flip = if integral.abs() < t_scale {
            f[0] < 0.0
        } else {
            integral < 0.0
        };
        if flip {
            f.iter_mut().for_each(|x| *x = -*x);
        }
        phi.push(f);
    }
    let lambda = lambda[..n_pos].to_vec();
    let mut acc = 0.0;
    let fve: Vec<f64> = lambda
        .iter()
        .map(|l| {
            acc += l;
            (acc / total).min(1.0)
        })
        .collect();
    let k = fve
        .iter()
        .position(|&f| f >= fve_threshold - 1e-12)
        .map_or(n_pos, |p| p + 1);
    Ok(Eigen { phi, lambda, fve, k })
}

/// Conditional-expectation scores, one row per subject.
pub fn pace_scores(
    data: &LongitudinalExposure,
    grid: &TimeGrid,
    mu: &[f64],
    phi: &[Vec<f64>],
    lambda: &[f64],
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    let k = lambda.len();
    if phi.len() < k {
        return Err(Error::Config(format!(
            "{k} scores requested but only {} eigenfunctions supplied",
            phi.len()
        )));
    }
    let mut scores = DMatrix::zeros(data.n_subjects(), k);
    let mut failed = 0usize;
    for (i, s) in data.subjects().iter().enumerate() {
        let ni = s.len();
        let pm = DMatrix::from_fn(ni, k, |r, c| grid.interpolate(&phi[c], s.times[r]));
        let resid = DVector::from_fn(ni, |r, _| s.values[r] - grid.interpolate(mu, s.times[r]));
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(lambda));
        let mut cov = &pm * &lam * pm.transpose();
        for r in 0..ni {
            cov[(r, r)] += sigma2;
        }
        let chol = cov.clone().cholesky().or_else(|| {
            let scale = (cov.trace() / ni as f64).abs().max(1.0);
            let mut jittered = cov.clone();
            for r in 0..ni {
                jittered[(r, r)] += 1e-10 * scale;
            }
            jittered.cholesky()
        });
        match chol {
            Some(c) => {
                let solved = c.solve(&resid);
                let xi = &lam * pm.transpose() * solved;
                scores.row_mut(i).copy_from(&xi.transpose());
            }
            None => failed += 1,
        }
    }
    if failed > 0 {
        warn!("{failed} subjects had a singular score covariance; their scores were set to zero");
    }
    Ok(scores)
}

/// Mean, covariance, eigenfunctions and centred scores in one pass.
pub fn fit_fpca(data: &LongitudinalExposure, grid: &TimeGrid, options: &FpcaOptions) -> Result<FpcaModel> {
    let (mu, mean_bandwidth) = mean_with_bandwidth(data, grid, options.mean_bandwidth)?;
    let cov = estimate_cov_surface(data, grid, &mu, options.cov_bandwidth)?;
    let eig = eigendecompose(&cov.matrix, grid, options.fve_threshold)?;
    if options.max_components == Some(0) {
        return Err(Error::Config("at least one component must be retained".into()));
    }
    if let (Some(lo), Some(hi)) = (options.min_components, options.max_components) {
        if lo > hi {
            return Err(Error::Config(format!("minimum of {lo} components exceeds maximum {hi}")));
        }
    }
    let floor = options.min_components.unwrap_or(0).min(eig.phi.len());
    let k = eig.k.max(floor).min(options.max_components.unwrap_or(usize::MAX));
    let phi = eig.phi[..k].to_vec();
    let lambda = eig.lambda[..k].to_vec();
    let mut scores = pace_scores(data, grid, &mu, &phi, &lambda, cov.sigma2)?;
    let n = scores.nrows() as f64;
    for mut col in scores.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    Ok(FpcaModel {
        grid: grid.clone(),
        mu,
        phi,
        lambda,
        sigma2: cov.sigma2,
        fve: eig.fve[..k].to_vec(),
        subject_ids: data.subject_ids(),
        scores,
        mean_bandwidth,
        cov_bandwidth: cov.bandwidth,
    })
}
