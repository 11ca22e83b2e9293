//! Basis systems for the effect function and the transformation matrix
//! `B[k][l] = <φ_k, b_l>` that maps basis coefficients to PC effects.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::FpcaModel;
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    Eigenfunction,
    /// Monomials up to `degree` in time rescaled to `[0, 1]`.
    Polynomial { degree: usize },
}

/// Basis family without a size, as chosen on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Eigen,
    Poly,
}

impl BasisFamily {
    pub fn with_size(self, l: usize) -> BasisKind {
        match self {
            BasisFamily::Eigen => BasisKind::Eigenfunction,
            BasisFamily::Poly => BasisKind::Polynomial {
                degree: l.saturating_sub(1),
            },
        }
    }
}

impl FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigen" => Ok(BasisFamily::Eigen),
            "poly" => Ok(BasisFamily::Poly),
            other => Err(Error::Config(format!(
                "unknown basis {other:?}, expected eigen or poly"
            ))),
        }
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisFamily::Eigen => "eigen",
            BasisFamily::Poly => "poly",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub kind: BasisKind,
    pub grid: TimeGrid,
    /// One row per basis function, evaluated on `grid`.
    pub b: Vec<Vec<f64>>,
    /// `K × L`.
    pub transform: DMatrix<f64>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn n_components(&self) -> usize {
        self.transform.nrows()
    }

    /// `b(t)` at an arbitrary time; grid-based bases are interpolated.
    pub fn values_at(&self, t: f64) -> Vec<f64> {
        match self.kind {
            BasisKind::Polynomial { degree } => {
                let u = (t - self.grid.t_min()) / self.grid.span();
                (0..=degree).map(|p| u.powi(p as i32)).collect()
            }
            BasisKind::Eigenfunction => self.b.iter().map(|f| self.grid.interpolate(f, t)).collect(),
        }
    }

    /// Coefficients of `Σ_l γ_l b_l(t)` on the raw monomials `1, t, t², ...`.
    /// `None` for the eigenfunction basis.
    pub fn original_scale_coefficients(&self, gamma: &[f64]) -> Option<Vec<f64>> {
        let BasisKind::Polynomial { degree } = self.kind else {
            return None;
        };
        let a = self.grid.t_min();
        let s = self.grid.span();
        let mut out = vec![0.0; degree + 1];
        // ((t - a)/s)^p = s^-p Σ_q C(p,q) t^q (-a)^(p-q)
        for (p, g) in gamma.iter().enumerate() {
            let mut binom = 1.0;
            for q in 0..=p {
                out[q] += g * binom * (-a).powi((p - q) as i32) / s.powi(p as i32);
                binom = binom * (p - q) as f64 / (q + 1) as f64;
            }
        }
        Some(out)
    }
}

/// Builds `L` basis functions on the model grid and their transformation matrix.
pub fn make_basis(kind: BasisKind, l: usize, model: &FpcaModel) -> Result<BasisSet> {
    let k = model.n_components();
    if l == 0 {
        return Err(Error::Config("the basis needs at least one function".into()));
    }
    if l > k {
        return Err(Error::Identification(format!(
            "{l} basis functions but only {k} principal components: L <= K is required"
        )));
    }
    let grid = model.grid.clone();
    let b: Vec<Vec<f64>> = match kind {
        BasisKind::Eigenfunction => model.phi[..l].to_vec(),
        BasisKind::Polynomial { degree } => {
            if degree + 1 != l {
                return Err(Error::Config(format!(
                    "polynomial degree {degree} does not give {l} basis functions"
                )));
            }
            let span = grid.span();
            (0..l)
                .map(|p| {
                    grid.points()
                        .iter()
                        .map(|t| ((t - grid.t_min()) / span).powi(p as i32))
                        .collect()
                })
                .collect()
        }
    };
    let transform = match kind {
        BasisKind::Eigenfunction => DMatrix::from_fn(k, l, |r, c| grid.inner(&model.phi[r], &b[c])),
        BasisKind::Polynomial { degree } => {
            DMatrix::from_fn(k, l, |r, c| polynomial_moment(&grid, &model.phi[r], c, degree))
        }
    };
    let sv = transform.singular_values();
    let (smax, smin) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
    if !(smin > 1e-8 * smax) {
        return Err(Error::Identification(format!(
            "transformation matrix is rank deficient (singular values {smin:.3e} .. {smax:.3e})"
        )));
    }
    Ok(BasisSet {
        kind,
        grid,
        b,
        transform,
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        let k = i.max(j) as f64;
        if i.abs_diff(j) == 1 {
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect()
}

/// `∫ φ(t) u(t)^p dt` with `φ` linear between grid points, exact per cell.
fn polynomial_moment(grid: &TimeGrid, phi: &[f64], p: usize, degree: usize) -> f64 {
    // the integrand has degree p + 1 <= degree + 1 on each cell
    let rule = gauss_legendre(degree / 2 + 2);
    let (dt, span, t0) = (grid.dt(), grid.span(), grid.t_min());
    let pts = grid.points();
    let mut total = 0.0;
    for i in 0..pts.len() - 1 {
        let (a, fa, fb) = (pts[i], phi[i], phi[i + 1]);
        for &(x, w) in &rule {
            let s = 0.5 * (x + 1.0);
            let t = a + s * dt;
            total += 0.5 * dt * w * (fa + s * (fb - fa)) * ((t - t0) / span).powi(p as i32);
        }
    }
    total
}

/// `ξ* = ξ B`.
pub fn transform_scores(scores: &DMatrix<f64>, basis: &BasisSet) -> Result<DMatrix<f64>> {
    if scores.ncols() != basis.n_components() {
        return Err(Error::Config(format!(
            "scores have {} columns but the basis was built for {} components",
            scores.ncols(),
            basis.n_components()
        )));
    }
    Ok(scores * &basis.transform)
}

/// `β(t) = b(t)ᵀ γ` on the grid.
pub fn effect_curve(coefficients: &[f64], basis: &BasisSet) -> Vec<f64> {
    debug_assert_eq!(coefficients.len(), basis.len());
    let m = basis.grid.len();
    (0..m)
        .map(|i| basis.b.iter().zip(coefficients).map(|(f, c)| f[i] * c).sum())
        .collect()
}
