#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tvmr::fpca::FpcaModel;
use tvmr::grid::TimeGrid;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Linear IV data: `x = z π + c·u + v`, `y = x β + c·u + e`.
pub struct IvData {
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn iv_data(n: usize, j: usize, l: usize, strength: f64, confounding: f64, seed: u64) -> IvData {
    let mut r = rng(seed);
    let z = DMatrix::from_fn(n, j, |_, _| normal(&mut r));
    let pi = DMatrix::from_fn(j, l, |_, _| strength * normal(&mut r));
    let beta: Vec<f64> = (0..l).map(|k| 0.5 - 0.3 * k as f64).collect();
    let u: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let mut x = &z * &pi;
    for i in 0..n {
        for k in 0..l {
            x[(i, k)] += confounding * u[i] + normal(&mut r);
        }
    }
    let bv = DVector::from_column_slice(&beta);
    let xb = &x * &bv;
    let y = (0..n).map(|i| xb[i] + confounding * u[i] + normal(&mut r)).collect();
    IvData { z, x, y, beta }
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
pub fn ks_pvalue(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v: Vec<f64> = samples.iter().map(|&x| cdf(x)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &f)| (f - i as f64 / n).max((i + 1) as f64 / n - f))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=200)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

/// Eigenvalues by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut a = a.clone();
    for _ in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Shifted Legendre polynomial of degree `p` on `[0, T]`, orthonormal in L².
pub fn legendre(p: usize, t: f64, t_max: f64) -> f64 {
    let x = 2.0 * t / t_max - 1.0;
    let (mut p0, mut p1) = (1.0, x);
    let v = match p {
        0 => 1.0,
        1 => x,
        _ => {
            for k in 1..p {
                let k = k as f64;
                let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    };
    v * ((2 * p + 1) as f64 / t_max).sqrt()
}

/// FPCA model whose eigenfunctions are Legendre polynomials on `[0, 50]`.
pub fn legendre_model(points: usize, k: usize, n: usize, seed: u64) -> FpcaModel {
    let grid = TimeGrid::new(0.0, 50.0, points).unwrap();
    let phi: Vec<Vec<f64>> = (0..k)
        .map(|p| grid.points().iter().map(|&t| legendre(p, t, 50.0)).collect())
        .collect();
    let mut r = rng(seed);
    let lambda: Vec<f64> = (0..k).map(|c| 2.0 / (c + 1) as f64).collect();
    let total: f64 = lambda.iter().sum();
    let mut acc = 0.0;
    let fve = lambda
        .iter()
        .map(|l| {
            acc += l;
            acc / total
        })
        .collect();
    FpcaModel {
        mu: vec![0.0; grid.len()],
        phi,
        lambda,
        sigma2: 0.1,
        fve,
        subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
        scores: DMatrix::from_fn(n, k, |_, _| normal(&mut r)),
        mean_bandwidth: 1.0,
        cov_bandwidth: 1.0,
        grid,
    }
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * r.random_range(-1.0..1.0)).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// FPCA model from a random covariance surface on a 51-point grid.
pub fn random_surface_model(k: usize, seed: u64) -> FpcaModel {
    let grid = TimeGrid::new(0.0, 50.0, 51).unwrap();
    let mut r = rng(seed);
    let m = grid.len();
    let f = DMatrix::from_fn(m, k, |i, c| {
        let t = grid.points()[i] / 50.0;
        (std::f64::consts::PI * (c + 1) as f64 * t + normal(&mut r) * 0.1).sin() + 0.3 * t
    });
    let surface = &f * f.transpose();
    let e = tvmr::fpca::eigendecompose(&surface, &grid, 0.999_999).unwrap();
    let kk = e.k.min(k);
    FpcaModel {
        grid,
        mu: vec![0.0; m],
        phi: e.phi[..kk].to_vec(),
        lambda: e.lambda[..kk].to_vec(),
        sigma2: 0.0,
        fve: e.fve[..kk].to_vec(),
        subject_ids: vec![],
        scores: DMatrix::zeros(0, kk),
        mean_bandwidth: 1.0,
        cov_bandwidth: 1.0,
    }
}
