//! Continuously-updating GMM on instruments, transformed PC scores and the
//! outcome, and the effect-function estimate built from it.
//!
//! Everything the estimator touches is a function of the second moments of
//! `(Z, ξ*, Y)`, so those are formed once and each objective evaluation costs
//! `O(J²)` regardless of `n`.

use std::sync::OnceLock;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{effect_curve, transform_scores, BasisSet};
use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt, rank, spd_inverse};
use crate::longdata::center_columns;

/// Normal quantile used for the pointwise 95% bands.
pub const Z95: f64 = 1.96;

pub const MAX_ITERATIONS: usize = 500;
pub const GRADIENT_TOL: f64 = 1e-8;
pub const STEP_TOL: f64 = 1e-10;
/// Relative Newton-decrement tolerance of the quasi-Newton iterations.
pub const DECREMENT_TOL: f64 = 1e-13;
const NELDER_MEAD_RESTARTS: usize = 50;

#[derive(Debug, Clone)]
pub struct GmmProblem {
    z: DMatrix<f64>,
    xi: DMatrix<f64>,
    y: DVector<f64>,
    n: f64,
    szz: DMatrix<f64>,
    szx: DMatrix<f64>,
    szy: DVector<f64>,
    sxx: DMatrix<f64>,
    sxy: DVector<f64>,
    syy: f64,
    szz_inv: DMatrix<f64>,
    szz_inv_sqrt: DMatrix<f64>,
    // (1/n) Σ Z Zᵀ ξ_k Y and (1/n) Σ Z Zᵀ ξ_k ξ_l, built on first use
    pointwise: OnceLock<(Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>)>,
}

fn column_centered(m: &DMatrix<f64>) -> bool {
    let n = m.nrows() as f64;
    m.column_iter().all(|c| {
        let mean = c.sum() / n;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        mean.abs() <= 1e-10 * sd.max(f64::MIN_POSITIVE) || mean == 0.0
    })
}

impl GmmProblem {
    /// Columns must already be centred.
    pub fn new(z: DMatrix<f64>, xi: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = z.nrows();
        if xi.nrows() != n || y.len() != n {
            return Err(Error::Config(format!(
                "instrument rows {n}, exposure rows {}, outcome length {} differ",
                xi.nrows(),
                y.len()
            )));
        }
        let (j, l) = (z.ncols(), xi.ncols());
        if l == 0 || j < l {
            return Err(Error::Identification(format!(
                "{j} instruments cannot identify {l} parameters"
            )));
        }
        if n <= j {
            return Err(Error::Data(format!("{n} subjects for {j} instruments")));
        }
        let y_mat = DMatrix::from_column_slice(n, 1, y.as_slice());
        if !column_centered(&z) || !column_centered(&xi) || !column_centered(&y_mat) {
            return Err(Error::Config("GMM inputs must be mean centred".into()));
        }
        let nf = n as f64;
        let zt = z.transpose();
        let szz = (&zt * &z) / nf;
        let szx = (&zt * &xi) / nf;
        let szy = (&zt * &y) / nf;
        let sxx = (xi.transpose() * &xi) / nf;
        let sxy = (xi.transpose() * &y) / nf;
        let syy = y.dot(&y) / nf;
        let szz_inv = spd_inverse(&szz, "instrument second-moment matrix")?;
        let szz_inv_sqrt = inv_sqrt(&szz, "instrument second-moment matrix")?;
        Ok(Self {
            z,
            xi,
            y,
            n: nf,
            szz,
            szx,
            szy,
            sxx,
            sxy,
            syy,
            szz_inv,
            szz_inv_sqrt,
            pointwise: OnceLock::new(),
        })
    }

    /// Centres every column, then builds the problem.
    pub fn centered(z: &DMatrix<f64>, xi: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let yc = crate::longdata::center_vector(y);
        Self::new(center_columns(z), center_columns(xi), DVector::from_vec(yc))
    }

    /// Instruments `genotype`, transformed scores `scores · B` and outcome `y`,
    /// all centred.
    pub fn from_scores(
        genotype: &DMatrix<f64>,
        scores: &DMatrix<f64>,
        y: &[f64],
        basis: &BasisSet,
    ) -> Result<Self> {
        Self::centered(genotype, &transform_scores(scores, basis)?, y)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_instruments(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.xi.ncols()
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn xi(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub(crate) fn szz(&self) -> &DMatrix<f64> {
        &self.szz
    }

    pub(crate) fn szx(&self) -> &DMatrix<f64> {
        &self.szx
    }

    pub(crate) fn szy(&self) -> &DVector<f64> {
        &self.szy
    }

    pub(crate) fn szz_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.szz_inv_sqrt
    }

    /// `(1/n) ‖Y − ξ* β‖²`.
    pub fn residual_variance(&self, beta: &DVector<f64>) -> f64 {
        let v = self.syy - 2.0 * beta.dot(&self.sxy) + beta.dot(&(&self.sxx * beta));
        v.max(0.0)
    }

    /// `(1/n) ξ*ᵀ(Y − ξ*β)`.
    pub(crate) fn exposure_residual_moment(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.sxy - &self.sxx * beta
    }

    /// `(1/n) Σ −Z ξ*_k (Y − ξ*ᵀβ) Zᵀ` for each `k`.
    pub(crate) fn pointwise_delta(&self, beta: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (a, b) = self.pointwise.get_or_init(|| self.pointwise_tensors());
        (0..self.n_params())
            .map(|k| {
                let mut d = -&a[k];
                for (l, bl) in beta.iter().enumerate() {
                    d += &b[k][l] * *bl;
                }
                d
            })
            .collect()
    }

    fn pointwise_tensors(&self) -> (Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>) {
        let (n, j, l) = (self.n(), self.n_instruments(), self.n_params());
        let weighted = |w: &dyn Fn(usize) -> f64| {
            let mut zw = self.z.clone();
            for i in 0..n {
                let s = w(i);
                zw.row_mut(i).scale_mut(s);
            }
            (self.z.transpose() * zw) / self.n
        };
        let a = (0..l)
            .map(|k| weighted(&|i| self.xi[(i, k)] * self.y[i]))
            .collect();
        let mut b = vec![vec![DMatrix::zeros(j, j); l]; l];
        for k in 0..l {
            for m in k..l {
                let t = weighted(&|i| self.xi[(i, k)] * self.xi[(i, m)]);
                b[m][k] = t.clone();
                b[k][m] = t;
            }
        }
        (a, b)
    }
}

/// Sample moments `g(β) = (1/n) Zᵀ(Y − ξ*β)` and the homoskedastic weight
/// `Ω(β) = (1/n) ZᵀZ · (1/n) ‖Y − ξ*β‖²`.
pub fn moment_fn(problem: &GmmProblem, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let b = DVector::from_column_slice(beta);
    let g = &problem.szy - &problem.szx * &b;
    let omega = &problem.szz * problem.residual_variance(&b);
    (g, omega)
}

/// `n g(β)ᵀ Ω(β)⁻¹ g(β)`.
pub fn cue_objective(problem: &GmmProblem, beta: &[f64]) -> f64 {
    objective_parts(problem, &DVector::from_column_slice(beta)).0
}

// (Q, a, s², g)
fn objective_parts(p: &GmmProblem, beta: &DVector<f64>) -> (f64, f64, f64, DVector<f64>) {
    let g = &p.szy - &p.szx * beta;
    let a = g.dot(&(&p.szz_inv * &g));
    let s2 = p.residual_variance(beta);
    let q = if s2 > 0.0 {
        p.n * a / s2
    } else if a == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    (q, a, s2, g)
}

/// Analytic gradient of [`cue_objective`].
pub fn cue_gradient(problem: &GmmProblem, beta: &[f64]) -> Vec<f64> {
    gradient(problem, &DVector::from_column_slice(beta)).as_slice().to_vec()
}

fn gradient(p: &GmmProblem, beta: &DVector<f64>) -> DVector<f64> {
    let (_, a, s2, g) = objective_parts(p, beta);
    let da = -2.0 * p.szx.transpose() * (&p.szz_inv * &g);
    let ds2 = -2.0 * &p.sxy + 2.0 * (&p.sxx * beta);
    (da * s2 - ds2 * a) * (p.n / (s2 * s2))
}

/// Two-stage least squares, `(SzxᵀSzz⁻¹Szx)⁻¹ SzxᵀSzz⁻¹Szy`.
pub fn two_stage_least_squares(problem: &GmmProblem) -> Result<Vec<f64>> {
    check_identified(problem)?;
    let h = problem.szx.transpose() * &problem.szz_inv * &problem.szx;
    let rhs = problem.szx.transpose() * &problem.szz_inv * &problem.szy;
    let hinv = spd_inverse(&h, "first-stage information matrix")?;
    Ok((hinv * rhs).as_slice().to_vec())
}

fn check_identified(problem: &GmmProblem) -> Result<()> {
    let l = problem.n_params();
    if rank(&problem.szx, 1e-10) < l {
        return Err(Error::Identification(format!(
            "instruments do not identify {l} parameters"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    QuasiNewton,
    NelderMead,
    /// The starting value already fits the outcome exactly.
    ExactFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CueFit {
    pub gamma_hat: Vec<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub optimizer: Optimizer,
}

/// Minimises the CUE objective from the 2SLS start.
pub fn fit_cue(problem: &GmmProblem) -> Result<CueFit> {
    let start = DVector::from_vec(two_stage_least_squares(problem)?);
    let (beta, iterations, optimizer) = if problem.residual_variance(&start)
        <= 1e-12 * problem.syy.max(f64::MIN_POSITIVE)
    {
        (start, 0, Optimizer::ExactFit)
    } else {
        match bfgs(problem, &start)? {
            Some((b, it)) => (b, it, Optimizer::QuasiNewton),
            None => {
                warn!("line search failed; falling back to Nelder-Mead restarts");
                (nelder_mead(problem, &start), 0, Optimizer::NelderMead)
            }
        }
    };
    let s2 = problem.residual_variance(&beta);
    let h = problem.szx.transpose() * &problem.szz_inv * &problem.szx;
    let sigma_hat = spd_inverse(&h, "first-stage information matrix")? * (s2 / problem.n);
    let sigma_hat = (&sigma_hat + sigma_hat.transpose()) * 0.5;
    let objective_value = objective_parts(problem, &beta).0;
    debug!("CUE converged after {iterations} iterations, objective {objective_value:.6}");
    Ok(CueFit {
        gamma_hat: beta.as_slice().to_vec(),
        sigma_hat,
        objective_value,
        iterations,
        optimizer,
    })
}

/// BFGS with Armijo backtracking. `Ok(None)` when the line search stalls away
/// from a stationary point.
fn bfgs(p: &GmmProblem, start: &DVector<f64>) -> Result<Option<(DVector<f64>, usize)>> {
    let l = start.len();
    let mut x = start.clone();
    let (mut f, _, s2, _) = objective_parts(p, &x);
    let mut gr = gradient(p, &x);
    // Gauss–Newton curvature of the objective at the start
    let h0 = spd_inverse(
        &(p.szx.transpose() * &p.szz_inv * &p.szx * (2.0 * p.n / s2)),
        "first-stage information matrix",
    )?;
    let mut hinv = h0.clone();
    // the objective grows with n, so also stop once the Newton decrement under
    // the starting curvature is at the rounding level of the objective
    let converged = |gr: &DVector<f64>, f: f64| {
        gr.amax() < GRADIENT_TOL || gr.dot(&(&h0 * gr)) < DECREMENT_TOL * f.abs().max(1.0)
    };
    for it in 0..MAX_ITERATIONS {
        if converged(&gr, f) {
            return Ok(Some((x, it)));
        }
        let mut dir = -(&hinv * &gr);
        let mut slope = gr.dot(&dir);
        if !(slope < 0.0) {
            hinv = h0.clone();
            dir = -(&hinv * &gr);
            slope = gr.dot(&dir);
        }
        let mut alpha = 1.0;
        let (x_new, f_new) = loop {
            let cand = &x + &dir * alpha;
            let fc = objective_parts(p, &cand).0;
            if fc <= f + 1e-4 * alpha * slope {
                break (cand, fc);
            }
            alpha *= 0.5;
            if alpha < 1e-20 {
                // at the floating-point floor the gradient is small relative
                // to the objective; accept rather than wander
                let floor = 1e-6 * f.abs().max(1.0) / (1.0 + x.amax());
                return Ok((gr.amax() < floor).then_some((x, it)));
            }
        };
        let step = &x_new - &x;
        let g_new = gradient(p, &x_new);
        let yv = &g_new - &gr;
        let sy = step.dot(&yv);
        x = x_new;
        f = f_new;
        gr = g_new;
        if step.amax() < STEP_TOL * (1.0 + x.amax()) && converged(&gr, f) {
            return Ok(Some((x, it + 1)));
        }
        if sy > 1e-12 * step.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(l, l);
            let left = &eye - (&step * yv.transpose()) * rho;
            let right = &eye - (&yv * step.transpose()) * rho;
            hinv = &left * &hinv * &right + (&step * step.transpose()) * rho;
        }
    }
    Err(Error::Numerical(format!(
        "CUE did not converge after {MAX_ITERATIONS} iterations; last iterate {:?}, gradient norm {:.3e}",
        x.as_slice(),
        gr.amax()
    )))
}

fn nelder_mead(p: &GmmProblem, start: &DVector<f64>) -> DVector<f64> {
    let l = start.len();
    let h = p.szx.transpose() * &p.szz_inv * &p.szx;
    let s2 = p.residual_variance(start);
    let scale: Vec<f64> = match spd_inverse(&h, "information") {
        Ok(inv) => (0..l).map(|i| (inv[(i, i)] * s2 / p.n).sqrt().max(1e-8)).collect(),
        Err(_) => vec![1.0; l],
    };
    let f = |x: &DVector<f64>| objective_parts(p, x).0;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e6d);
    let mut best = (f(start), start.clone());
    for r in 0..NELDER_MEAD_RESTARTS {
        let x0 = if r == 0 {
            start.clone()
        } else {
            DVector::from_fn(l, |i, _| start[i] + scale[i] * rng.random_range(-3.0..3.0))
        };
        let x = simplex_search(&f, &x0, &scale);
        let fx = f(&x);
        if fx < best.0 {
            best = (fx, x);
        }
    }
    best.1
}

fn simplex_search(f: &dyn Fn(&DVector<f64>) -> f64, x0: &DVector<f64>, scale: &[f64]) -> DVector<f64> {
    let l = x0.len();
    let mut pts: Vec<DVector<f64>> = vec![x0.clone()];
    for i in 0..l {
        let mut v = x0.clone();
        v[i] += scale[i];
        pts.push(v);
    }
    let mut vals: Vec<f64> = pts.iter().map(f).collect();
    for _ in 0..5000 {
        let mut idx: Vec<usize> = (0..=l).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        if (vals[l] - vals[0]).abs() <= 1e-14 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid = pts[..l].iter().fold(DVector::zeros(l), |acc, p| acc + p) / l as f64;
        let reflect = &centroid + (&centroid - &pts[l]);
        let fr = f(&reflect);
        if fr < vals[0] {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let fe = f(&expand);
            if fe < fr {
                pts[l] = expand;
                vals[l] = fe;
            } else {
                pts[l] = reflect;
                vals[l] = fr;
            }
        } else if fr < vals[l - 1] {
            pts[l] = reflect;
            vals[l] = fr;
        } else {
            let contract = &centroid + (&pts[l] - &centroid) * 0.5;
            let fc = f(&contract);
            if fc < vals[l] {
                pts[l] = contract;
                vals[l] = fc;
            } else {
                for i in 1..=l {
                    pts[i] = &pts[0] + (&pts[i] - &pts[0]) * 0.5;
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let i = (0..=l).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    pts[i].clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Continuously-updating GMM.
    Cue,
    /// Ordinary least squares without instruments.
    Association,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcmrFit {
    pub estimator: Estimator,
    pub t: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub beta_curve: Vec<f64>,
    pub se_curve: Vec<f64>,
    pub gmm_lo: Vec<f64>,
    pub gmm_hi: Vec<f64>,
    /// CUE objective at the optimum; for the association fit, `RSS / n`.
    pub objective_value: f64,
    pub n: usize,
}

impl MpcmrFit {
    fn from_coefficients(
        estimator: Estimator,
        gamma_hat: Vec<f64>,
        sigma_hat: DMatrix<f64>,
        objective_value: f64,
        n: usize,
        basis: &BasisSet,
    ) -> Self {
        let beta_curve = effect_curve(&gamma_hat, basis);
        let se_curve: Vec<f64> = (0..basis.grid.len())
            .map(|i| {
                let b = DVector::from_iterator(basis.len(), basis.b.iter().map(|f| f[i]));
                b.dot(&(&sigma_hat * &b)).max(0.0).sqrt()
            })
            .collect();
        let gmm_lo = beta_curve.iter().zip(&se_curve).map(|(b, s)| b - Z95 * s).collect();
        let gmm_hi = beta_curve.iter().zip(&se_curve).map(|(b, s)| b + Z95 * s).collect();
        Self {
            estimator,
            t: basis.grid.points().to_vec(),
            gamma_hat,
            sigma_hat,
            beta_curve,
            se_curve,
            gmm_lo,
            gmm_hi,
            objective_value,
            n,
        }
    }

    /// Point estimate and standard error at an arbitrary time.
    pub fn estimate_at(&self, basis: &BasisSet, t: f64) -> (f64, f64) {
        let b = DVector::from_vec(basis.values_at(t));
        let g = DVector::from_column_slice(&self.gamma_hat);
        (b.dot(&g), b.dot(&(&self.sigma_hat * &b)).max(0.0).sqrt())
    }
}

/// CUE on the transformed scores and the implied effect curve with
/// `± 1.96 se` pointwise bands.
pub fn fit_mpcmr(problem: &GmmProblem, basis: &BasisSet) -> Result<MpcmrFit> {
    if problem.n_params() != basis.len() {
        return Err(Error::Config(format!(
            "problem has {} parameters but the basis has {} functions",
            problem.n_params(),
            basis.len()
        )));
    }
    let cue = fit_cue(problem)?;
    Ok(MpcmrFit::from_coefficients(
        Estimator::Cue,
        cue.gamma_hat,
        cue.sigma_hat,
        cue.objective_value,
        problem.n(),
        basis,
    ))
}

/// Least-squares regression of `y` on the (transformed) scores, ignoring the
/// instruments.
pub fn fit_association(xi: &DMatrix<f64>, y: &[f64], basis: &BasisSet) -> Result<MpcmrFit> {
    let n = xi.nrows();
    let l = xi.ncols();
    if y.len() != n {
        return Err(Error::Config("score and outcome lengths differ".into()));
    }
    if l != basis.len() {
        return Err(Error::Config(format!(
            "{l} score columns but the basis has {} functions",
            basis.len()
        )));
    }
    if n <= l + 1 {
        return Err(Error::Data(format!("{n} subjects for {l} regressors")));
    }
    let x = center_columns(xi);
    let yc = DVector::from_vec(crate::longdata::center_vector(y));
    let xtx = x.transpose() * &x;
    if rank(&xtx, 1e-12) < l {
        return Err(Error::Identification("score design is rank deficient".into()));
    }
    let inv = spd_inverse(&xtx, "score cross-product")?;
    let gamma = &inv * (x.transpose() * &yc);
    let resid = &yc - &x * &gamma;
    let rss = resid.dot(&resid);
    let sigma2 = rss / (n - l - 1) as f64;
    let cov = &inv * sigma2;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(MpcmrFit::from_coefficients(
        Estimator::Association,
        gamma.as_slice().to_vec(),
        cov,
        rss / n as f64,
        n,
        basis,
    ))
}
