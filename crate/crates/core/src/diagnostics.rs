//! Instrument strength and validity diagnostics, summary-level association
//! statistics and the IVW fit built on them.

use std::collections::{HashMap, HashSet};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::fpca::FpcaModel;
use crate::linalg::{rank, sample_cov, sample_var, spd_inverse};
use crate::longdata::center_columns;
use crate::mpcmr::{cue_objective, GmmProblem};

pub const Q_TOL: f64 = 1e-8;
pub const Q_MAX_ITERATIONS: usize = 100;

/// Rows of the individual-level data that contributed the PC associations
/// (`exposure`) and the outcome associations (`outcome`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSplit {
    pub exposure: Vec<usize>,
    pub outcome: Vec<usize>,
}

impl SampleSplit {
    /// One-sample design: every subject in both.
    pub fn full(n: usize) -> Self {
        Self {
            exposure: (0..n).collect(),
            outcome: (0..n).collect(),
        }
    }

    pub fn from_ids(ids: &[String], exposure_ids: &[String], outcome_ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = |want: &[String], what: &str| -> Result<Vec<usize>> {
            want.iter()
                .map(|id| {
                    index.get(id.as_str()).copied().ok_or_else(|| {
                        Error::Data(format!("{what} subject {id} is not in the analysed data"))
                    })
                })
                .collect()
        };
        Ok(Self {
            exposure: rows(exposure_ids, "exposure-sample")?,
            outcome: rows(outcome_ids, "outcome-sample")?,
        })
    }

    pub fn shared(&self) -> Vec<usize> {
        let out: HashSet<usize> = self.outcome.iter().copied().collect();
        self.exposure.iter().copied().filter(|i| out.contains(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub theta_hat: Vec<f64>,
    pub se_theta: Vec<f64>,
    /// `J × K`.
    pub alpha_hat: DMatrix<f64>,
    /// `J × K`; `Σ_{α,j}` is taken diagonal with these squared.
    pub se_alpha: DMatrix<f64>,
    /// `J × K` covariances `cov(α̂_{j,k}, θ̂_j)`.
    pub gamma: DMatrix<f64>,
    pub n1: usize,
    pub n2: usize,
    pub ns: usize,
    /// Covariance of the PC residuals after regressing on all variants,
    /// in the exposure sample.
    pub pc_resid_cov: DMatrix<f64>,
    /// Genotype sample variance per variant in the exposure sample.
    pub var_g: Vec<f64>,
}

impl SummaryStats {
    pub fn n_instruments(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn n_components(&self) -> usize {
        self.alpha_hat.ncols()
    }

    pub fn sigma_alpha(&self, j: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.se_alpha.row(j).transpose().map(|s| s * s))
    }
}

struct SimpleFit {
    slope: f64,
    se: f64,
}

fn simple_regression(g: &[f64], x: &[f64]) -> SimpleFit {
    let n = g.len() as f64;
    let gm = g.iter().sum::<f64>() / n;
    let xm = x.iter().sum::<f64>() / n;
    let sgg: f64 = g.iter().map(|v| (v - gm).powi(2)).sum();
    let sgx: f64 = g.iter().zip(x).map(|(a, b)| (a - gm) * (b - xm)).sum();
    let slope = sgx / sgg;
    let rss: f64 = g
        .iter()
        .zip(x)
        .map(|(a, b)| (b - xm - slope * (a - gm)).powi(2))
        .sum();
    SimpleFit {
        slope,
        se: (rss / (n - 2.0) / sgg).sqrt(),
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    m.select_rows(rows.iter())
}

/// Residuals of each column of `y` after least squares on `x` with an intercept.
fn residualize(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xtx = xc.transpose() * &xc;
    let inv = spd_inverse(&xtx, "genotype cross-product")?;
    Ok(&yc - &xc * (inv * (xc.transpose() * &yc)))
}

/// Per-variant univariable associations with each PC and the outcome, and the
/// overlap covariances `Γ` estimated on the shared subjects.
pub fn compute_summary_stats(
    genotype: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    y: &[f64],
    split: &SampleSplit,
) -> Result<SummaryStats> {
    let n = genotype.nrows();
    if scores.nrows() != n || y.len() != n {
        return Err(Error::Config("genotype, scores and outcome row counts differ".into()));
    }
    if split.exposure.iter().chain(&split.outcome).any(|&i| i >= n) {
        return Err(Error::Data("sample split refers to rows outside the data".into()));
    }
    let (j, k) = (genotype.ncols(), scores.ncols());
    let (n1, n2) = (split.exposure.len(), split.outcome.len());
    if n1 <= j + 1 || n2 <= 2 {
        return Err(Error::Data(format!(
            "samples too small for {j} variants (exposure {n1}, outcome {n2})"
        )));
    }
    let g1 = select_rows(genotype, &split.exposure);
    let x1 = select_rows(scores, &split.exposure);
    let g2 = select_rows(genotype, &split.outcome);
    let y2: Vec<f64> = split.outcome.iter().map(|&i| y[i]).collect();

    let cols = |m: &DMatrix<f64>, c: usize| -> Vec<f64> { m.column(c).iter().copied().collect() };
    let mut corr_warned = false;
    let var_g: Vec<f64> = (0..j).map(|a| sample_var(&cols(&g1, a))).collect();
    for a in 0..j {
        for b in a + 1..j {
            let r = sample_cov(&cols(&g1, a), &cols(&g1, b)) / (var_g[a] * var_g[b]).sqrt();
            if r.abs() >= 0.2 && !corr_warned {
                warn!("variants {a} and {b} are correlated (r = {r:.2}); the diagonal approximation may be poor");
                corr_warned = true;
            }
        }
    }

    let mut alpha_hat = DMatrix::zeros(j, k);
    let mut se_alpha = DMatrix::zeros(j, k);
    let mut theta_hat = vec![0.0; j];
    let mut se_theta = vec![0.0; j];
    for a in 0..j {
        let g = cols(&g1, a);
        if !(var_g[a] > 0.0) {
            return Err(Error::Data(format!("variant {a} is constant in the exposure sample")));
        }
        for c in 0..k {
            let f = simple_regression(&g, &cols(&x1, c));
            alpha_hat[(a, c)] = f.slope;
            se_alpha[(a, c)] = f.se;
        }
        let f = simple_regression(&cols(&g2, a), &y2);
        theta_hat[a] = f.slope;
        se_theta[a] = f.se;
    }
    if se_theta.iter().chain(se_alpha.iter()).any(|s| !(*s > 0.0)) {
        return Err(Error::Data("an association has zero standard error".into()));
    }

    let resid1 = residualize(&g1, &x1)?;
    let pc_resid_cov = (resid1.transpose() * &resid1) / (n1 as f64 - 1.0);

    let shared = split.shared();
    let ns = shared.len();
    let mut gamma = DMatrix::zeros(j, k);
    if ns > j + 1 {
        let gs = select_rows(genotype, &shared);
        let mut ys = DMatrix::zeros(ns, k + 1);
        for (r, &i) in shared.iter().enumerate() {
            for c in 0..k {
                ys[(r, c)] = scores[(i, c)];
            }
            ys[(r, k)] = y[i];
        }
        let v = residualize(&gs, &ys)?;
        let vy = cols(&v, k);
        let factor = ns as f64 / (n1 as f64 * n2 as f64);
        for c in 0..k {
            let cv = sample_cov(&cols(&v, c), &vy);
            for a in 0..j {
                gamma[(a, c)] = factor * cv / sample_var(&cols(&gs, a));
            }
        }
    } else if ns > 0 {
        warn!("only {ns} shared subjects; overlap covariances set to zero");
    }
    Ok(SummaryStats {
        theta_hat,
        se_theta,
        alpha_hat,
        se_alpha,
        gamma,
        n1,
        n2,
        ns,
        pc_resid_cov,
        var_g,
    })
}

/// `α̂_j(t) = Σ_k α̂_{j,k} φ_k(t)` on the model grid.
pub fn genetic_assoc_curve(alpha_row: &[f64], model: &FpcaModel) -> Vec<f64> {
    debug_assert_eq!(alpha_row.len(), model.n_components());
    (0..model.grid.len())
        .map(|i| alpha_row.iter().zip(&model.phi).map(|(a, f)| a * f[i]).sum())
        .collect()
}

/// Conditional F for exposure `k`: two-stage regression of column `k` on the
/// other columns with instruments `z`, then the F statistic of the instruments
/// for the resulting residual,
/// `(êᵀP_Zê / (J − (L − 1))) / (êᵀM_Zê / (n − J − 1))`.
/// With a single exposure this is the classical first-stage F.
pub fn conditional_f(xi: &DMatrix<f64>, z: &DMatrix<f64>, k: usize) -> Result<f64> {
    let (n, l) = (xi.nrows(), xi.ncols());
    let j = z.ncols();
    if z.nrows() != n {
        return Err(Error::Config("score and instrument rows differ".into()));
    }
    if k >= l {
        return Err(Error::Config(format!("exposure index {k} out of range for {l} columns")));
    }
    if j < l || n <= j + 1 {
        return Err(Error::Identification(format!(
            "{j} instruments and {n} subjects cannot assess {l} exposures"
        )));
    }
    let zc = center_columns(z);
    let xc = center_columns(xi);
    let ztz_inv = spd_inverse(&(zc.transpose() * &zc), "instrument cross-product")?;
    let project = |v: &DMatrix<f64>| &zc * (&ztz_inv * (zc.transpose() * v));
    let xk = xc.column(k).clone_owned();
    let e = if l == 1 {
        xk
    } else {
        let others: Vec<usize> = (0..l).filter(|&c| c != k).collect();
        let xo = xc.select_columns(others.iter());
        let pxo = project(&xo);
        let lhs = pxo.transpose() * &xo;
        if rank(&lhs, 1e-12) < l - 1 {
            return Err(Error::Identification(
                "conditioning exposures are not identified by the instruments".into(),
            ));
        }
        let delta = lhs
            .lu()
            .solve(&(pxo.transpose() * &xk))
            .ok_or_else(|| Error::Numerical("singular conditional first stage".into()))?;
        xk - xo * delta
    };
    let pe = project(&DMatrix::from_column_slice(n, 1, e.as_slice()));
    let explained = e.dot(&pe.column(0));
    let residual = e.dot(&e) - explained;
    let df1 = (j - (l - 1)) as f64;
    let df2 = (n - j - 1) as f64;
    if !(residual > 0.0) {
        return Err(Error::Numerical("conditional first stage fits perfectly".into()));
    }
    Ok((explained / df1) / (residual / df2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub gamma_robust: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Statistic evaluated at the step-0 (standard weighted) estimate.
    pub statistic_initial: f64,
}

struct QInputs<'a> {
    theta: &'a [f64],
    se_theta: &'a [f64],
    alpha: DMatrix<f64>,
    se_alpha: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

fn chi2_sf(x: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).map(|d| d.sf(x)).unwrap_or(f64::NAN)
}

fn q_iterate(inp: &QInputs<'_>, bmat: &DMatrix<f64>) -> Result<QResult> {
    let j = inp.theta.len();
    let l = bmat.ncols();
    if bmat.nrows() != inp.alpha.ncols() {
        return Err(Error::Config("transformation matrix does not match the associations".into()));
    }
    if j <= l {
        return Err(Error::Identification(format!(
            "Q statistic needs more instruments than parameters: df = {} < 1",
            j as i64 - l as i64
        )));
    }
    let a = &inp.alpha * bmat;
    let mut floored = 0usize;
    let denominators = |g: &DVector<f64>, floored: &mut usize| -> Vec<f64> {
        let bg = bmat * g;
        (0..j)
            .map(|r| {
                let se2 = inp.se_theta[r].powi(2);
                let sa: f64 = (0..bg.len()).map(|c| (bg[c] * inp.se_alpha[(r, c)]).powi(2)).sum();
                let cross: f64 = (0..bg.len()).map(|c| bg[c] * inp.gamma[(r, c)]).sum();
                let d = se2 + sa - 2.0 * cross;
                if d > 0.0 {
                    d
                } else {
                    *floored += 1;
                    1e-12 * se2
                }
            })
            .collect()
    };
    let wls = |d: &[f64]| -> Result<DVector<f64>> {
        let mut lhs = DMatrix::zeros(l, l);
        let mut rhs = DVector::zeros(l);
        for r in 0..j {
            let ar = a.row(r).transpose();
            lhs += &ar * ar.transpose() / d[r];
            rhs += &ar * (inp.theta[r] / d[r]);
        }
        if rank(&lhs, 1e-12) < l {
            return Err(Error::Identification("associations do not identify the parameters".into()));
        }
        Ok(spd_inverse(&lhs, "weighted association cross-product")? * rhs)
    };
    let q_at = |g: &DVector<f64>, d: &[f64]| -> f64 {
        (0..j)
            .map(|r| (inp.theta[r] - (a.row(r) * g)[0]).powi(2) / d[r])
            .sum()
    };
    let se2: Vec<f64> = inp.se_theta.iter().map(|s| s * s).collect();
    let mut g = wls(&se2)?;
    let statistic_initial = {
        let mut f = 0;
        q_at(&g, &denominators(&g, &mut f))
    };
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=Q_MAX_ITERATIONS {
        let d = denominators(&g, &mut floored);
        let next = wls(&d)?;
        let change = (&next - &g).norm();
        g = next;
        iterations = it;
        if change < Q_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("robust Q estimate did not stabilise after {Q_MAX_ITERATIONS} iterations");
    }
    let d = denominators(&g, &mut floored);
    if floored > 0 {
        warn!("{floored} nonpositive Q denominators floored at 1e-12 se^2");
    }
    let statistic = q_at(&g, &d).max(0.0);
    let df = j - l;
    Ok(QResult {
        statistic,
        df,
        p_value: chi2_sf(statistic, df),
        gamma_robust: g.as_slice().to_vec(),
        iterations,
        converged,
        statistic_initial,
    })
}

/// Heterogeneity Q for the basis model with the iterative robust estimate.
pub fn cochran_q(stats: &SummaryStats, basis: &BasisSet) -> Result<QResult> {
    cochran_q_transform(stats, &basis.transform)
}

/// [`cochran_q`] with an explicit `K × L` transformation matrix.
pub fn cochran_q_transform(stats: &SummaryStats, bmat: &DMatrix<f64>) -> Result<QResult> {
    q_iterate(
        &QInputs {
            theta: &stats.theta_hat,
            se_theta: &stats.se_theta,
            alpha: stats.alpha_hat.clone(),
            se_alpha: stats.se_alpha.clone(),
            gamma: stats.gamma.clone(),
        },
        bmat,
    )
}

/// Strength Q for PC `k`: PC `k` plays the outcome, the remaining PCs the
/// exposures. Rejection indicates that `k` is not a linear combination of the
/// others, i.e. adequate conditional strength.
pub fn q_strength(stats: &SummaryStats, k: usize) -> Result<QResult> {
    let kk = stats.n_components();
    if kk < 2 {
        return Err(Error::Config("strength Q needs at least two components".into()));
    }
    if k >= kk {
        return Err(Error::Config(format!("component {k} out of range")));
    }
    let j = stats.n_instruments();
    let others: Vec<usize> = (0..kk).filter(|&c| c != k).collect();
    let theta: Vec<f64> = stats.alpha_hat.column(k).iter().copied().collect();
    let se_theta: Vec<f64> = stats.se_alpha.column(k).iter().copied().collect();
    let mut gamma = DMatrix::zeros(j, kk - 1);
    for r in 0..j {
        for (c, &o) in others.iter().enumerate() {
            gamma[(r, c)] = stats.pc_resid_cov[(o, k)] / (stats.n1 as f64 * stats.var_g[r]);
        }
    }
    q_iterate(
        &QInputs {
            theta: &theta,
            se_theta: &se_theta,
            alpha: stats.alpha_hat.select_columns(others.iter()),
            se_alpha: stats.se_alpha.select_columns(others.iter()),
            gamma,
        },
        &DMatrix::identity(kk - 1, kk - 1),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvwFit {
    pub gamma: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Multiplicative overdispersion, floored at 1.
    pub tau2: f64,
}

/// Inverse-variance weighted regression of `θ̂` on `α̂B`.
pub fn ivw_fit(stats: &SummaryStats, basis: &BasisSet) -> Result<IvwFit> {
    ivw_fit_transform(stats, &basis.transform)
}

pub fn ivw_fit_transform(stats: &SummaryStats, bmat: &DMatrix<f64>) -> Result<IvwFit> {
    let j = stats.n_instruments();
    let l = bmat.ncols();
    if bmat.nrows() != stats.n_components() {
        return Err(Error::Config("transformation matrix does not match the associations".into()));
    }
    if j < l {
        return Err(Error::Identification(format!("{j} instruments for {l} parameters")));
    }
    let a = &stats.alpha_hat * bmat;
    let w: Vec<f64> = stats.se_theta.iter().map(|s| 1.0 / (s * s)).collect();
    let mut lhs = DMatrix::zeros(l, l);
    let mut rhs = DVector::zeros(l);
    for r in 0..j {
        let ar = a.row(r).transpose();
        lhs += &ar * ar.transpose() * w[r];
        rhs += &ar * (stats.theta_hat[r] * w[r]);
    }
    if rank(&lhs, 1e-12) < l {
        return Err(Error::Identification("α̂B is rank deficient".into()));
    }
    let inv = spd_inverse(&lhs, "IVW information")?;
    let gamma = &inv * rhs;
    let q: f64 = (0..j)
        .map(|r| (stats.theta_hat[r] - (a.row(r) * &gamma)[0]).powi(2) * w[r])
        .sum();
    let tau2 = if j > l { (q / (j - l) as f64).max(1.0) } else { 1.0 };
    Ok(IvwFit {
        gamma: gamma.as_slice().to_vec(),
        covariance: inv * tau2,
        tau2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarganResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Over-identification statistic: the CUE objective at `gamma` against `χ²_{J−L}`.
pub fn sargan(problem: &GmmProblem, gamma: &[f64]) -> Result<SarganResult> {
    let df = problem.n_instruments() as i64 - problem.n_params() as i64;
    if df < 1 {
        return Err(Error::Identification("Sargan test needs J > L".into()));
    }
    let statistic = cue_objective(problem, gamma);
    Ok(SarganResult {
        statistic,
        df: df as usize,
        p_value: chi2_sf(statistic, df as usize),
    })
}
