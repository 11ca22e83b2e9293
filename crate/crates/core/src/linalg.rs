use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Inverse of a symmetric positive-definite matrix by Cholesky, rejecting
/// pivots below `1e-13` of the largest diagonal entry.
pub(crate) fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let top = a.diagonal().amax();
    a.clone()
        .cholesky()
        .filter(|c| c.l_dirty().diagonal().iter().all(|d| d * d > 1e-13 * top))
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{what} is singular")))
}

/// `a^{-1/2}` of a symmetric positive-definite matrix by eigendecomposition.
pub(crate) fn inv_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let vals = &eig.eigenvalues;
    if !(vals.min() > 1e-12 * vals.max().abs()) {
        return Err(Error::Numerical(format!("{what} is singular")));
    }
    let d = DVector::from_iterator(n, vals.iter().map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Numerical rank with relative tolerance on the singular values.
pub(crate) fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = a.singular_values();
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Sample variance with the `n - 1` denominator.
pub(crate) fn sample_var(x: &[f64]) -> f64 {
    sample_cov(x, x)
}

pub(crate) fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}
