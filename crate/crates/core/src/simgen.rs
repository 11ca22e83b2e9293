//! Simulated cohorts: binomial genotypes, time-varying genetic effects,
//! Wiener-process confounding and noise, sparse exposure measurements and an
//! end-of-window outcome.
//!
//! Each subject draws from its own ChaCha stream (`stream = index + 1`) of the
//! master seed, so the data do not depend on the number of threads. Stream 0
//! of the coefficient seed provides the genetic-effect coefficients.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::FpcaModel;
use crate::grid::{interp_uniform, trapezoid_weights};
use crate::longdata::{
    create_output, write_exposure_csv, write_genotype_csv, write_outcome_csv, GenotypeMatrix,
    LongitudinalExposure, OutcomeVector, SubjectSeries,
};

pub const ALLELE_FREQUENCY: f64 = 0.3;
/// Weight of the confounder `U₀ + U(T)` in the outcome.
pub const CONFOUNDER_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExposureScenario {
    /// `α_j(t) = 0.05 sin(a_j t) + b_j`.
    A,
    /// `α_j(t) = a_j + b_j t`, `b_j ~ U(−0.004, 0.004)`.
    B,
    /// `α_j(t) = a_j + b_j t`, `b_j ~ U(−0.01, 0.01)`.
    C,
}

impl ExposureScenario {
    pub fn alpha(self, a: f64, b: f64, t: f64) -> f64 {
        match self {
            ExposureScenario::A => 0.05 * (a * t).sin() + b,
            ExposureScenario::B | ExposureScenario::C => a + b * t,
        }
    }

    fn slope_range(self) -> f64 {
        match self {
            ExposureScenario::A => 0.1,
            ExposureScenario::B => 0.004,
            ExposureScenario::C => 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum OutcomeScenario {
    Null = 1,
    Constant = 2,
    Increasing = 3,
    SignChange = 4,
    EarlyThreshold = 5,
    LateThreshold = 6,
}

impl OutcomeScenario {
    pub const ALL: [OutcomeScenario; 6] = [
        OutcomeScenario::Null,
        OutcomeScenario::Constant,
        OutcomeScenario::Increasing,
        OutcomeScenario::SignChange,
        OutcomeScenario::EarlyThreshold,
        OutcomeScenario::LateThreshold,
    ];

    pub fn beta(self, t: f64) -> f64 {
        match self {
            OutcomeScenario::Null => 0.0,
            OutcomeScenario::Constant => 0.1,
            OutcomeScenario::Increasing => 0.02 * t,
            OutcomeScenario::SignChange => 0.5 - 0.02 * t,
            OutcomeScenario::EarlyThreshold => {
                if t < 20.0 {
                    0.05 * (20.0 - t)
                } else {
                    0.0
                }
            }
            OutcomeScenario::LateThreshold => {
                if t > 30.0 {
                    0.05 * (t - 30.0)
                } else {
                    0.0
                }
            }
        }
    }
}

impl TryFrom<u8> for OutcomeScenario {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        OutcomeScenario::ALL
            .get((v as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("outcome scenario must be 1..6, got {v}")))
    }
}

impl From<OutcomeScenario> for u8 {
    fn from(s: OutcomeScenario) -> u8 {
        s as u8
    }
}

/// Exposure and outcome scenario pair such as `A3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scenario {
    pub exposure: ExposureScenario,
    pub outcome: OutcomeScenario,
}

impl FromStr for ExposureScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ExposureScenario::A),
            "B" | "b" => Ok(ExposureScenario::B),
            "C" | "c" => Ok(ExposureScenario::C),
            other => Err(Error::Config(format!("unknown exposure scenario {other:?}"))),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("scenario {s:?} should look like A3"));
        if s.len() != 2 || !s.is_ascii() {
            return Err(bad());
        }
        let exposure = s[..1].parse()?;
        let digit: u8 = s[1..].parse().map_err(|_| bad())?;
        Ok(Scenario {
            exposure,
            outcome: OutcomeScenario::try_from(digit)?,
        })
    }
}

impl fmt::Display for ExposureScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.exposure, self.outcome as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub j: usize,
    pub t_max: f64,
    pub obs_per_subject: usize,
    pub exposure_scenario: ExposureScenario,
    pub outcome_scenario: OutcomeScenario,
    pub seed: u64,
    pub dense_grid_points: usize,
    /// Seed for the genetic-effect coefficients; `None` uses `seed`.
    pub genetic_effects_seed: Option<u64>,
    /// Keep every subject's dense trajectory in the dataset.
    pub keep_dense: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            j: 30,
            t_max: 50.0,
            obs_per_subject: 10,
            exposure_scenario: ExposureScenario::A,
            outcome_scenario: OutcomeScenario::Null,
            seed: 1,
            dense_grid_points: 501,
            genetic_effects_seed: None,
            keep_dense: false,
        }
    }
}

impl SimConfig {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            exposure: self.exposure_scenario,
            outcome: self.outcome_scenario,
        }
    }

    pub fn with_scenario(mut self, s: Scenario) -> Self {
        self.exposure_scenario = s.exposure;
        self.outcome_scenario = s.outcome;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.j == 0 || self.obs_per_subject == 0 {
            return Err(Error::Config("n, J and observations per subject must be positive".into()));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.t_max)));
        }
        if self.dense_grid_points < 3 {
            return Err(Error::Config("dense grid needs at least 3 points".into()));
        }
        Ok(())
    }

    pub fn dense_dt(&self) -> f64 {
        self.t_max / (self.dense_grid_points - 1) as f64
    }

    pub fn dense_grid(&self) -> Vec<f64> {
        let dt = self.dense_dt();
        let m = self.dense_grid_points;
        let mut g: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
        g[m - 1] = self.t_max;
        g
    }
}

/// Closed-form effect function of the configured outcome scenario.
pub fn true_effect_at(config: &SimConfig, t: f64) -> Result<f64> {
    if !(0.0..=config.t_max).contains(&t) {
        return Err(Error::Config(format!("time {t} is outside [0, {}]", config.t_max)));
    }
    Ok(config.outcome_scenario.beta(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub config: SimConfig,
    pub genotype: GenotypeMatrix,
    pub exposure: LongitudinalExposure,
    pub outcome: OutcomeVector,
    pub dense_grid: Vec<f64>,
    /// `n × dense points`; present when `keep_dense` was set.
    pub dense_trajectories: Option<DMatrix<f64>>,
    /// `J × dense points`.
    pub true_alpha: DMatrix<f64>,
    pub true_beta: Vec<f64>,
    pub alpha_a: Vec<f64>,
    pub alpha_b: Vec<f64>,
}

struct SubjectDraw {
    g: Vec<f64>,
    times: Vec<f64>,
    values: Vec<f64>,
    dense: Option<Vec<f64>>,
    integrals: Vec<f64>,
    noise: f64,
}

fn coefficients(config: &SimConfig) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.genetic_effects_seed.unwrap_or(config.seed));
    rng.set_stream(0);
    let slope = config.exposure_scenario.slope_range();
    let mut a = Vec::with_capacity(config.j);
    let mut b = Vec::with_capacity(config.j);
    for _ in 0..config.j {
        a.push(rng.random_range(-0.1..0.1));
        b.push(rng.random_range(-slope..slope));
    }
    (a, b)
}

fn draw_subject(
    config: &SimConfig,
    i: usize,
    alpha: &DMatrix<f64>,
    betas: &[Vec<f64>],
    weights: &[f64],
) -> SubjectDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64 + 1);
    let binom = Binomial::new(2, ALLELE_FREQUENCY).expect("valid binomial");
    let g: Vec<f64> = (0..config.j).map(|_| binom.sample(&mut rng) as f64).collect();
    let m = config.dense_grid_points;
    let dt = config.dense_dt();
    // Var U(t) = t / T, so each increment has variance dt / T
    let step_sd = (dt / config.t_max).sqrt();
    let u0: f64 = StandardNormal.sample(&mut rng);
    let mut x = vec![0.0; m];
    let (mut u, mut e) = (0.0, 0.0);
    for (k, xk) in x.iter_mut().enumerate() {
        if k > 0 {
            let du: f64 = StandardNormal.sample(&mut rng);
            let de: f64 = StandardNormal.sample(&mut rng);
            u += step_sd * du;
            e += step_sd * de;
        }
        let gene: f64 = (0..config.j).map(|jj| alpha[(jj, k)] * g[jj]).sum();
        *xk = gene + u0 + u + e;
    }
    let u_end = u;
    let mut times: Vec<f64> = (0..config.obs_per_subject)
        .map(|_| rng.random_range(0.0..=config.t_max))
        .collect();
    times.sort_by(f64::total_cmp);
    let values = times.iter().map(|&t| interp_uniform(0.0, dt, &x, t)).collect();
    let eps_y: f64 = StandardNormal.sample(&mut rng);
    let integrals = betas
        .iter()
        .map(|beta| beta.iter().zip(&x).zip(weights).map(|((b, xv), w)| b * xv * w).sum())
        .collect();
    SubjectDraw {
        g,
        times,
        values,
        dense: config.keep_dense.then_some(x),
        integrals,
        noise: CONFOUNDER_WEIGHT * (u0 + u_end) + eps_y,
    }
}

pub fn subject_id(i: usize) -> String {
    format!("s{:06}", i + 1)
}

/// One dataset under `config`.
pub fn gen_dataset(config: &SimConfig) -> Result<SimDataset> {
    Ok(gen_dataset_outcomes(config, &[])?.0)
}

/// One dataset plus the outcomes the same subjects would have under each of
/// `extra` (sharing genotypes, exposures and outcome noise).
pub fn gen_dataset_outcomes(
    config: &SimConfig,
    extra: &[OutcomeScenario],
) -> Result<(SimDataset, Vec<OutcomeVector>)> {
    config.validate()?;
    let (alpha_a, alpha_b) = coefficients(config);
    let dense_grid = config.dense_grid();
    let m = dense_grid.len();
    let true_alpha = DMatrix::from_fn(config.j, m, |jj, k| {
        config.exposure_scenario.alpha(alpha_a[jj], alpha_b[jj], dense_grid[k])
    });
    let scenarios: Vec<OutcomeScenario> = std::iter::once(config.outcome_scenario)
        .chain(extra.iter().copied())
        .collect();
    let betas: Vec<Vec<f64>> = scenarios
        .iter()
        .map(|s| dense_grid.iter().map(|&t| s.beta(t)).collect())
        .collect();
    let weights = trapezoid_weights(m, config.dense_dt());
    let draws: Vec<SubjectDraw> = (0..config.n)
        .into_par_iter()
        .map(|i| draw_subject(config, i, &true_alpha, &betas, &weights))
        .collect();

    let ids: Vec<String> = (0..config.n).map(subject_id).collect();
    let variant_ids: Vec<String> = (0..config.j).map(|jj| format!("g{}", jj + 1)).collect();
    let dosages = DMatrix::from_fn(config.n, config.j, |i, jj| draws[i].g[jj]);
    let genotype = GenotypeMatrix::from_parts_unchecked(ids.clone(), variant_ids, dosages);
    let subjects = draws
        .iter()
        .zip(&ids)
        .map(|(d, id)| SubjectSeries {
            id: id.clone(),
            times: d.times.clone(),
            values: d.values.clone(),
        })
        .collect();
    let exposure = LongitudinalExposure::new(0.0, config.t_max, subjects)?;
    let outcomes: Vec<OutcomeVector> = (0..scenarios.len())
        .map(|s| {
            let y = draws.iter().map(|d| d.integrals[s] + d.noise).collect();
            OutcomeVector::new(ids.clone(), y, config.t_max)
        })
        .collect::<Result<_>>()?;
    let dense_trajectories = config.keep_dense.then(|| {
        DMatrix::from_fn(config.n, m, |i, k| draws[i].dense.as_ref().map_or(0.0, |x| x[k]))
    });
    let mut outcomes = outcomes.into_iter();
    let outcome = outcomes.next().expect("primary outcome");
    let dataset = SimDataset {
        config: *config,
        genotype,
        exposure,
        outcome,
        dense_grid,
        dense_trajectories,
        true_alpha,
        true_beta: betas[0].clone(),
        alpha_a,
        alpha_b,
    };
    Ok((dataset, outcomes.collect()))
}

/// Scores obtained by projecting each dense trajectory, centred at `model.mu`,
/// onto the model eigenfunctions with trapezoid quadrature on the model grid.
pub fn true_scores(dataset: &SimDataset, model: &FpcaModel) -> Result<DMatrix<f64>> {
    let dense = dataset
        .dense_trajectories
        .as_ref()
        .ok_or_else(|| Error::Config("dataset was generated without dense trajectories".into()))?;
    let dt = dataset.config.dense_dt();
    let grid = &model.grid;
    let k = model.n_components();
    let mut out = DMatrix::zeros(dense.nrows(), k);
    let mut row = vec![0.0; dense.ncols()];
    for i in 0..dense.nrows() {
        row.iter_mut().zip(dense.row(i).iter()).for_each(|(r, v)| *r = *v);
        let centred: Vec<f64> = grid
            .points()
            .iter()
            .zip(&model.mu)
            .map(|(&t, mu)| interp_uniform(0.0, dt, &row, t) - mu)
            .collect();
        for c in 0..k {
            out[(i, c)] = grid.inner(&centred, &model.phi[c]);
        }
    }
    Ok(out)
}

/// Writes `exposure.csv`, `genotype.csv`, `outcome.csv` and `truth.csv`.
pub fn write_simulation(dir: &Path, dataset: &SimDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_exposure_csv(&dir.join("exposure.csv"), &dataset.exposure)?;
    write_genotype_csv(&dir.join("genotype.csv"), &dataset.genotype)?;
    write_outcome_csv(&dir.join("outcome.csv"), &dataset.outcome)?;
    let path = dir.join("truth.csv");
    let mut w = create_output(&path)?;
    let io = |e| Error::io(&path, e);
    write!(w, "t,beta_true").map_err(io)?;
    for jj in 0..dataset.true_alpha.nrows() {
        write!(w, ",alpha_{}", jj + 1).map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (k, t) in dataset.dense_grid.iter().enumerate() {
        write!(w, "{t},{}", dataset.true_beta[k]).map_err(io)?;
        for jj in 0..dataset.true_alpha.nrows() {
            write!(w, ",{}", dataset.true_alpha[(jj, k)]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
