//! Kleibergen's LM statistic and confidence bands by inverting it over a grid
//! of candidate coefficients.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::mpcmr::{GmmProblem, MpcmrFit};

pub const DEFAULT_LM_POINTS: usize = 41;
pub const MIN_LM_POINTS: usize = 11;
/// Half-width of the search window in standard errors.
pub const LM_WINDOW_SE: f64 = 4.0;

/// Estimator of the covariance between the moments and their Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DeltaEstimator {
    /// `−(1/n)ZᵀZ · (1/n)ξ*ᵀ(Y − ξ*β)`, consistent with the homoskedastic
    /// weight matrix; the statistic is then exactly zero at the CUE estimate.
    #[default]
    Homoskedastic,
    /// `(1/n) Σ −Z ξ*_k (Y − ξ*ᵀβ) Zᵀ` evaluated observation by observation.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    /// Candidates per coefficient; odd so the estimate sits on the grid.
    pub m: usize,
    pub delta: DeltaEstimator,
    /// Double the window once if the accepted set reaches its edge.
    pub expand: bool,
    pub level: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_LM_POINTS,
            delta: DeltaEstimator::Homoskedastic,
            expand: false,
            level: 0.95,
        }
    }
}

struct LmParts {
    // Ω^{-1/2} D and Ω^{-1/2} g
    a: DMatrix<f64>,
    u: DVector<f64>,
}

fn lm_parts(problem: &GmmProblem, beta0: &DVector<f64>, delta: DeltaEstimator) -> Result<LmParts> {
    let s2 = problem.residual_variance(beta0);
    let scale = problem.szz().trace() / problem.n_instruments() as f64;
    if !(s2 > 1e-300) || !(scale > 0.0) {
        return Err(Error::Numerical("moment covariance is singular".into()));
    }
    let s = s2.sqrt();
    let w = problem.szz_inv_sqrt();
    let g = problem.szy() - problem.szx() * beta0;
    let wg = w * &g;
    let d = match delta {
        DeltaEstimator::Homoskedastic => {
            let m = problem.exposure_residual_moment(beta0);
            -problem.szx() + &g * m.transpose() / s2
        }
        DeltaEstimator::Pointwise => {
            let omega_inv_g = w * &wg / s2;
            let deltas = problem.pointwise_delta(beta0);
            let mut d = -problem.szx().clone();
            for (k, dk) in deltas.iter().enumerate() {
                let col = dk.transpose() * &omega_inv_g;
                let mut c = d.column_mut(k);
                c -= col;
            }
            d
        }
    };
    Ok(LmParts {
        a: w * d / s,
        u: wg / s,
    })
}

fn gram_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ata = a.transpose() * a;
    let eig = ata.clone().symmetric_eigenvalues();
    let top = eig.max();
    if !(top > 0.0) || !(eig.min() > 1e-12 * top) {
        return Err(Error::Numerical("robust statistic undefined at this point".into()));
    }
    ata.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("robust statistic undefined at this point".into()))
}

/// `LM(β₀)` with the default Jacobian-covariance estimator.
pub fn lm_statistic(problem: &GmmProblem, beta0: &[f64]) -> Result<f64> {
    lm_statistic_with(problem, beta0, DeltaEstimator::default())
}

pub fn lm_statistic_with(problem: &GmmProblem, beta0: &[f64], delta: DeltaEstimator) -> Result<f64> {
    if beta0.len() != problem.n_params() {
        return Err(Error::Config(format!(
            "candidate has {} entries, problem has {} parameters",
            beta0.len(),
            problem.n_params()
        )));
    }
    let p = lm_parts(problem, &DVector::from_column_slice(beta0), delta)?;
    let inv = gram_inverse(&p.a)?;
    let au = p.a.transpose() * &p.u;
    Ok((problem.n() as f64 * au.dot(&(inv * &au))).max(0.0))
}

/// Projection onto the columns of `Ω^{-1/2} D(β₀)`.
pub fn lm_projection(problem: &GmmProblem, beta0: &[f64], delta: DeltaEstimator) -> Result<DMatrix<f64>> {
    let p = lm_parts(problem, &DVector::from_column_slice(beta0), delta)?;
    let inv = gram_inverse(&p.a)?;
    Ok(&p.a * inv * p.a.transpose())
}

/// `χ²_df` quantile.
pub fn chi2_quantile(df: usize, level: f64) -> f64 {
    ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(level)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmGrid {
    /// Candidate values per coefficient, increasing.
    pub axes: Vec<Vec<f64>>,
    /// LM at every candidate, first coefficient varying slowest; NaN where
    /// the statistic is undefined.
    pub lm: Vec<f64>,
    pub rejected: Vec<bool>,
    pub critical_value: f64,
    /// Half-width of the window actually searched, in standard errors.
    pub window_se: f64,
}

impl LmGrid {
    pub fn len(&self) -> usize {
        self.lm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lm.is_empty()
    }

    pub fn m(&self) -> usize {
        self.axes[0].len()
    }

    fn indices(&self, mut c: usize) -> Vec<usize> {
        let m = self.m();
        let l = self.axes.len();
        let mut idx = vec![0; l];
        for slot in idx.iter_mut().rev() {
            *slot = c % m;
            c /= m;
        }
        idx
    }

    pub fn candidate(&self, c: usize) -> Vec<f64> {
        self.indices(c)
            .iter()
            .enumerate()
            .map(|(l, &i)| self.axes[l][i])
            .collect()
    }

    /// Whether a candidate lies on the outer face of the grid.
    pub fn on_boundary(&self, c: usize) -> bool {
        let m = self.m();
        self.indices(c).iter().any(|&i| i == 0 || i == m - 1)
    }

    /// Indices of candidates that are not rejected.
    pub fn accepted(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| !self.rejected[c]).collect()
    }

    /// Pointwise band of `b(t)ᵀγ` over accepted candidates, with flags for
    /// extremes attained on the grid edge. NaN when nothing is accepted.
    pub fn band_at(&self, basis: &BasisSet, t: f64) -> (f64, f64, bool, bool) {
        let b = basis.values_at(t);
        self.band_with(&b)
    }

    fn band_with(&self, b: &[f64]) -> (f64, f64, bool, bool) {
        let mut lo = (f64::INFINITY, usize::MAX);
        let mut hi = (f64::NEG_INFINITY, usize::MAX);
        for c in self.accepted() {
            let v: f64 = self.candidate(c).iter().zip(b).map(|(g, x)| g * x).sum();
            if v < lo.0 {
                lo = (v, c);
            }
            if v > hi.0 {
                hi = (v, c);
            }
        }
        if lo.1 == usize::MAX {
            return (f64::NAN, f64::NAN, false, false);
        }
        (lo.0, hi.0, self.on_boundary(lo.1), self.on_boundary(hi.1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmBand {
    pub t: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub unbounded_lo: Vec<bool>,
    pub unbounded_hi: Vec<bool>,
}

impl LmBand {
    pub fn is_empty(&self) -> bool {
        self.lo.iter().all(|v| v.is_nan())
    }
}

fn evaluate_grid(
    problem: &GmmProblem,
    center: &[f64],
    se: &[f64],
    window: f64,
    options: &LmOptions,
) -> LmGrid {
    let m = options.m;
    let half = (m - 1) / 2;
    let axes: Vec<Vec<f64>> = center
        .iter()
        .zip(se)
        .map(|(&c, &s)| {
            (0..m)
                .map(|i| {
                    if i == half {
                        c
                    } else {
                        c + window * s * (i as f64 - half as f64) / half as f64
                    }
                })
                .collect()
        })
        .collect();
    let l = center.len();
    let total = m.pow(l as u32);
    let critical_value = chi2_quantile(l, options.level);
    let mut grid = LmGrid {
        axes,
        lm: Vec::new(),
        rejected: Vec::new(),
        critical_value,
        window_se: window,
    };
    let lm: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|c| {
            let cand = grid.candidate(c);
            lm_statistic_with(problem, &cand, options.delta).unwrap_or(f64::NAN)
        })
        .collect();
    let undefined = lm.iter().filter(|v| v.is_nan()).count();
    if undefined > 0 {
        warn!("LM statistic undefined at {undefined} grid candidates; treated as rejected");
    }
    grid.rejected = lm.iter().map(|&v| !(v < critical_value)).collect();
    grid.lm = lm;
    grid
}

/// Inverts the LM test over `γ̂ ± 4 se` with `m` points per coefficient.
pub fn lm_confidence(
    problem: &GmmProblem,
    fit: &MpcmrFit,
    basis: &BasisSet,
    options: &LmOptions,
) -> Result<(LmGrid, LmBand)> {
    let l = fit.gamma_hat.len();
    if l != problem.n_params() || l != basis.len() {
        return Err(Error::Config("fit, problem and basis disagree on L".into()));
    }
    if options.m < MIN_LM_POINTS || options.m % 2 == 0 {
        return Err(Error::Config(format!(
            "LM grid needs an odd number of points, at least {MIN_LM_POINTS}; got {}",
            options.m
        )));
    }
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(Error::Config(format!("confidence level {} is not in (0, 1)", options.level)));
    }
    let se: Vec<f64> = (0..l).map(|k| fit.sigma_hat[(k, k)].max(0.0).sqrt()).collect();
    if se.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Numerical("zero standard error; LM grid is degenerate".into()));
    }
    let mut grid = evaluate_grid(problem, &fit.gamma_hat, &se, LM_WINDOW_SE, options);
    let touches = |g: &LmGrid| g.accepted().iter().any(|&c| g.on_boundary(c));
    if options.expand && touches(&grid) {
        grid = evaluate_grid(problem, &fit.gamma_hat, &se, 2.0 * LM_WINDOW_SE, options);
    }
    let accepted = grid.accepted();
    if accepted.is_empty() {
        warn!(
            "every LM candidate is rejected; the model is incompatible with the data \
             (check instrument validity or the basis)"
        );
    } else if touches(&grid) {
        warn!("LM confidence region reaches the edge of the search grid; bands may be unbounded");
    }
    let m_t = basis.grid.len();
    let mut band = LmBand {
        t: basis.grid.points().to_vec(),
        lo: vec![f64::NAN; m_t],
        hi: vec![f64::NAN; m_t],
        unbounded_lo: vec![false; m_t],
        unbounded_hi: vec![false; m_t],
    };
    if !accepted.is_empty() {
        let candidates: Vec<(Vec<f64>, bool)> = accepted
            .iter()
            .map(|&c| (grid.candidate(c), grid.on_boundary(c)))
            .collect();
        for i in 0..m_t {
            let b: Vec<f64> = basis.b.iter().map(|f| f[i]).collect();
            let mut lo = (f64::INFINITY, false);
            let mut hi = (f64::NEG_INFINITY, false);
            for (cand, edge) in &candidates {
                let v: f64 = cand.iter().zip(&b).map(|(g, x)| g * x).sum();
                if v < lo.0 {
                    lo = (v, *edge);
                }
                if v > hi.0 {
                    hi = (v, *edge);
                }
            }
            band.lo[i] = lo.0;
            band.hi[i] = hi.0;
            band.unbounded_lo[i] = lo.1;
            band.unbounded_hi[i] = hi.1;
        }
    }
    Ok((grid, band))
}
