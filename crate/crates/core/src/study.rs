//! Monte-Carlo studies over simulated scenarios: per-replication fits,
//! MSE and coverage tables, and plot-ready curve output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{make_basis, transform_scores, BasisFamily, BasisSet};
use crate::diagnostics::conditional_f;
use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, FpcaOptions};
use crate::grid::{TimeGrid, DEFAULT_GRID_POINTS};
use crate::longdata::{create_output, OutcomeVector};
use crate::mpcmr::{fit_association, fit_mpcmr, GmmProblem, MpcmrFit, Z95};
use crate::robust::{lm_confidence, LmBand, LmOptions, DEFAULT_LM_POINTS, MIN_LM_POINTS};
use crate::simgen::{gen_dataset_outcomes, ExposureScenario, OutcomeScenario, Scenario, SimConfig};

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Least squares of the outcome on the scores, no instruments.
    Association,
    MpcmrEigen,
    MpcmrPoly,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Association, Strategy::MpcmrEigen, Strategy::MpcmrPoly];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Association => "association",
            Strategy::MpcmrEigen => "mpcmr-eigen",
            Strategy::MpcmrPoly => "mpcmr-poly",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

fn default_checkpoints() -> Vec<f64> {
    vec![10.0, 20.0, 30.0, 40.0]
}
fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_lm_points() -> usize {
    DEFAULT_LM_POINTS
}
fn default_n() -> usize {
    10_000
}
fn default_j() -> usize {
    30
}
fn default_t_max() -> f64 {
    50.0
}
fn default_obs() -> usize {
    10
}
fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}
fn default_components() -> usize {
    2
}
fn default_fve() -> f64 {
    0.95
}
fn default_dense() -> usize {
    501
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub exposure_scenarios: Vec<ExposureScenario>,
    pub outcome_scenarios: Vec<OutcomeScenario>,
    pub replications: usize,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// LM grid points per coefficient.
    #[serde(default = "default_lm_points")]
    pub lm_points: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_j")]
    pub j: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_obs")]
    pub obs_per_subject: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_dense")]
    pub dense_grid_points: usize,
    /// Number of principal components kept in every replication.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_fve")]
    pub fve_threshold: f64,
    /// Size of the polynomial basis.
    #[serde(default = "default_components")]
    pub poly_size: usize,
    /// Draw the genetic-effect coefficients once for the whole study.
    #[serde(default)]
    pub fix_genetic_effects: bool,
}

impl StudySpec {
    pub fn new(scenarios: &[Scenario], replications: usize, seed: u64) -> Self {
        let mut exposure: Vec<ExposureScenario> = scenarios.iter().map(|s| s.exposure).collect();
        let mut outcome: Vec<OutcomeScenario> = scenarios.iter().map(|s| s.outcome).collect();
        exposure.sort();
        exposure.dedup();
        outcome.sort();
        outcome.dedup();
        Self {
            exposure_scenarios: exposure,
            outcome_scenarios: outcome,
            replications,
            checkpoints: default_checkpoints(),
            strategies: default_strategies(),
            lm_points: DEFAULT_LM_POINTS,
            seed,
            threads: None,
            n: default_n(),
            j: default_j(),
            t_max: default_t_max(),
            obs_per_subject: default_obs(),
            grid_points: DEFAULT_GRID_POINTS,
            dense_grid_points: default_dense(),
            components: 2,
            fve_threshold: 0.95,
            poly_size: 2,
            fix_genetic_effects: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: StudySpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("study spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replications == 0 {
            return bad("a study needs at least one replication".into());
        }
        if self.exposure_scenarios.is_empty() || self.outcome_scenarios.is_empty() {
            return bad("a study needs at least one exposure and one outcome scenario".into());
        }
        if self.strategies.is_empty() {
            return bad("a study needs at least one strategy".into());
        }
        if let Some(t) = self.checkpoints.iter().find(|&&t| !(t > 0.0 && t < self.t_max)) {
            return bad(format!("checkpoint {t} is outside (0, {})", self.t_max));
        }
        if self.lm_points < MIN_LM_POINTS || self.lm_points % 2 == 0 {
            return bad(format!(
                "LM grid needs an odd number of points, at least {MIN_LM_POINTS}; got {}",
                self.lm_points
            ));
        }
        if self.components == 0 || self.poly_size == 0 {
            return bad("component and basis counts must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        self.sim_config(ExposureScenario::A, 0).validate()?;
        TimeGrid::new(0.0, self.t_max, self.grid_points)?;
        Ok(())
    }

    /// Scenario pairs in reporting order.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &exposure in &self.exposure_scenarios {
            for &outcome in &self.outcome_scenarios {
                out.push(Scenario { exposure, outcome });
            }
        }
        out
    }

    fn sim_config(&self, exposure: ExposureScenario, replication: usize) -> SimConfig {
        let tag = exposure as u64 + 1;
        SimConfig {
            n: self.n,
            j: self.j,
            t_max: self.t_max,
            obs_per_subject: self.obs_per_subject,
            exposure_scenario: exposure,
            outcome_scenario: self.outcome_scenarios.first().copied().unwrap_or(OutcomeScenario::Null),
            seed: replication_seed(self.seed, tag, replication as u64),
            dense_grid_points: self.dense_grid_points,
            genetic_effects_seed: self
                .fix_genetic_effects
                .then(|| replication_seed(self.seed, tag, u64::MAX)),
            keep_dense: false,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of one replication, independent of scheduling.
pub fn replication_seed(seed: u64, scenario: u64, replication: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ scenario) ^ replication)
}

/// One strategy evaluated at one checkpoint of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub scenario: Scenario,
    pub replication: usize,
    pub strategy: Strategy,
    pub t: f64,
    pub truth: f64,
    pub estimate: f64,
    pub se: f64,
    /// LM band for MPCMR strategies, `± 1.96 se` for association.
    pub covered: bool,
    pub covered_gmm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRecord {
    pub exposure: ExposureScenario,
    pub replication: usize,
    pub conditional_f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub exposure: ExposureScenario,
    pub outcome: Option<OutcomeScenario>,
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub t: f64,
    pub mse: f64,
    pub bias: f64,
    pub coverage: f64,
    pub coverage_gmm: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthSummary {
    pub exposure: ExposureScenario,
    pub mean_conditional_f: Vec<f64>,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub spec: StudySpec,
    pub cells: Vec<CellSummary>,
    pub strength: Vec<StrengthSummary>,
    pub records: Vec<CheckpointRecord>,
    pub strength_records: Vec<StrengthRecord>,
    pub failures: Vec<FailureRecord>,
}

impl StudyResult {
    pub fn cell(&self, scenario: Scenario, strategy: Strategy, t: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.strategy == strategy && c.t == t)
    }

    pub fn strength_for(&self, exposure: ExposureScenario) -> Option<&StrengthSummary> {
        self.strength.iter().find(|s| s.exposure == exposure)
    }
}

/// Coverage of `truth` by a band, where an unbounded side covers everything.
pub fn band_covers(lo: f64, hi: f64, unbounded_lo: bool, unbounded_hi: bool, truth: f64) -> bool {
    if lo.is_nan() || hi.is_nan() {
        return false;
    }
    (unbounded_lo || lo <= truth) && (unbounded_hi || truth <= hi)
}

struct Fitted<'a> {
    fit: MpcmrFit,
    basis: &'a BasisSet,
    band: Option<crate::robust::LmGrid>,
}

fn run_strategy<'a>(
    strategy: Strategy,
    eigen: &'a BasisSet,
    poly: &'a BasisSet,
    scores: &nalgebra::DMatrix<f64>,
    genotype: &nalgebra::DMatrix<f64>,
    y: &[f64],
    lm: &LmOptions,
) -> Result<Fitted<'a>> {
    match strategy {
        Strategy::Association => Ok(Fitted {
            fit: fit_association(&transform_scores(scores, eigen)?, y, eigen)?,
            basis: eigen,
            band: None,
        }),
        Strategy::MpcmrEigen | Strategy::MpcmrPoly => {
            let basis = if strategy == Strategy::MpcmrEigen { eigen } else { poly };
            let problem = GmmProblem::from_scores(genotype, scores, y, basis)?;
            let fit = fit_mpcmr(&problem, basis)?;
            let (grid, _) = lm_confidence(&problem, &fit, basis, lm)?;
            Ok(Fitted {
                fit,
                basis,
                band: Some(grid),
            })
        }
    }
}

struct ReplicationOutput {
    strength: Option<StrengthRecord>,
    records: Vec<CheckpointRecord>,
    failures: Vec<FailureRecord>,
}

fn run_replication(spec: &StudySpec, exposure: ExposureScenario, replication: usize) -> ReplicationOutput {
    let mut out = ReplicationOutput {
        strength: None,
        records: Vec::new(),
        failures: Vec::new(),
    };
    let fail_all = |out: &mut ReplicationOutput, e: Error| {
        warn!("replication {replication} of scenario {exposure} failed: {e}");
        for &o in &spec.outcome_scenarios {
            out.failures.push(FailureRecord {
                exposure,
                outcome: Some(o),
                replication,
                message: e.to_string(),
            });
        }
    };
    let config = spec.sim_config(exposure, replication);
    let extra = &spec.outcome_scenarios[1..];
    let (dataset, extra_outcomes) = match gen_dataset_outcomes(&config, extra) {
        Ok(d) => d,
        Err(e) => {
            fail_all(&mut out, e);
            return out;
        }
    };
    let grid = match TimeGrid::new(0.0, spec.t_max, spec.grid_points) {
        Ok(g) => g,
        Err(e) => {
            fail_all(&mut out, e);
            return out;
        }
    };
    let options = FpcaOptions {
        fve_threshold: spec.fve_threshold,
        min_components: Some(spec.components),
        max_components: Some(spec.components),
        ..FpcaOptions::default()
    };
    let prepared = fit_fpca(&dataset.exposure, &grid, &options).and_then(|model| {
        let eigen = make_basis(BasisFamily::Eigen.with_size(model.n_components()), model.n_components(), &model)?;
        let poly = make_basis(BasisFamily::Poly.with_size(spec.poly_size), spec.poly_size, &model)?;
        Ok((model, eigen, poly))
    });
    let (model, eigen, poly) = match prepared {
        Ok(p) => p,
        Err(e) => {
            fail_all(&mut out, e);
            return out;
        }
    };
    let genotype = dataset.genotype.dosages();
    let f: Vec<f64> = (0..model.n_components())
        .map(|k| conditional_f(&model.scores, genotype, k).unwrap_or(f64::NAN))
        .collect();
    out.strength = Some(StrengthRecord {
        exposure,
        replication,
        conditional_f: f,
    });
    let lm = LmOptions {
        m: spec.lm_points,
        expand: true,
        ..LmOptions::default()
    };
    let outcomes: Vec<(OutcomeScenario, &OutcomeVector)> = spec
        .outcome_scenarios
        .iter()
        .copied()
        .zip(std::iter::once(&dataset.outcome).chain(extra_outcomes.iter()))
        .collect();
    for (outcome, yv) in outcomes {
        let scenario = Scenario { exposure, outcome };
        let y = yv.values();
        let fits: Result<Vec<(Strategy, Fitted)>> = spec
            .strategies
            .iter()
            .map(|&s| run_strategy(s, &eigen, &poly, &model.scores, genotype, y, &lm).map(|f| (s, f)))
            .collect();
        let fits = match fits {
            Ok(f) => f,
            Err(e) => {
                warn!("replication {replication} of scenario {scenario} failed: {e}");
                out.failures.push(FailureRecord {
                    exposure,
                    outcome: Some(outcome),
                    replication,
                    message: e.to_string(),
                });
                continue;
            }
        };
        for (strategy, fitted) in &fits {
            for &t in &spec.checkpoints {
                let truth = outcome.beta(t);
                let (estimate, se) = fitted.fit.estimate_at(fitted.basis, t);
                let covered_gmm = (estimate - truth).abs() <= Z95 * se;
                let covered = match &fitted.band {
                    Some(g) => {
                        let (lo, hi, ulo, uhi) = g.band_at(fitted.basis, t);
                        band_covers(lo, hi, ulo, uhi, truth)
                    }
                    None => covered_gmm,
                };
                out.records.push(CheckpointRecord {
                    scenario,
                    replication,
                    strategy: *strategy,
                    t,
                    truth,
                    estimate,
                    se,
                    covered,
                    covered_gmm,
                });
            }
        }
    }
    out
}

/// Runs every replication of every scenario and aggregates the tables.
pub fn run_study(spec: &StudySpec) -> Result<StudyResult> {
    spec.validate()?;
    let units: Vec<(ExposureScenario, usize)> = spec
        .exposure_scenarios
        .iter()
        .flat_map(|&e| (0..spec.replications).map(move |r| (e, r)))
        .collect();
    let run = || -> Vec<ReplicationOutput> {
        units
            .par_iter()
            .map(|&(e, r)| run_replication(spec, e, r))
            .collect()
    };
    let outputs = match spec.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut records = Vec::new();
    let mut strength_records = Vec::new();
    let mut failures = Vec::new();
    for o in outputs {
        records.extend(o.records);
        strength_records.extend(o.strength);
        failures.extend(o.failures);
    }
    let total = units.len() * spec.outcome_scenarios.len();
    let rate = failures.len() as f64 / total as f64;
    if !failures.is_empty() {
        warn!("{} of {total} replications failed and were excluded", failures.len());
    }
    if rate > MAX_FAILURE_RATE {
        return Err(Error::Numerical(format!(
            "{} of {total} replications failed (limit {:.0}%); first error: {}",
            failures.len(),
            100.0 * MAX_FAILURE_RATE,
            failures[0].message
        )));
    }
    let cells = aggregate(spec, &records);
    let strength = spec
        .exposure_scenarios
        .iter()
        .map(|&e| {
            let rows: Vec<&StrengthRecord> = strength_records.iter().filter(|r| r.exposure == e).collect();
            let k = rows.iter().map(|r| r.conditional_f.len()).max().unwrap_or(0);
            let mean_conditional_f = (0..k)
                .map(|c| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter_map(|r| r.conditional_f.get(c).copied())
                        .filter(|f| f.is_finite())
                        .collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            StrengthSummary {
                exposure: e,
                mean_conditional_f,
                replications: rows.len(),
            }
        })
        .collect();
    info!("study finished: {} checkpoint records", records.len());
    Ok(StudyResult {
        spec: spec.clone(),
        cells,
        strength,
        records,
        strength_records,
        failures,
    })
}

#[derive(Default)]
struct Accumulator {
    sq: f64,
    err: f64,
    covered: usize,
    covered_gmm: usize,
    count: usize,
}

/// MSE, bias and coverage per scenario, strategy and checkpoint.
pub fn aggregate(spec: &StudySpec, records: &[CheckpointRecord]) -> Vec<CellSummary> {
    let mut acc: BTreeMap<(Scenario, Strategy, usize), Accumulator> = BTreeMap::new();
    for r in records {
        let Some(ti) = spec.checkpoints.iter().position(|&t| t == r.t) else {
            continue;
        };
        let a = acc.entry((r.scenario, r.strategy, ti)).or_default();
        let e = r.estimate - r.truth;
        a.sq += e * e;
        a.err += e;
        a.covered += r.covered as usize;
        a.covered_gmm += r.covered_gmm as usize;
        a.count += 1;
    }
    let mut cells = Vec::new();
    for scenario in spec.scenarios() {
        for &strategy in &spec.strategies {
            for (ti, &t) in spec.checkpoints.iter().enumerate() {
                let Some(a) = acc.get(&(scenario, strategy, ti)) else {
                    continue;
                };
                let n = a.count as f64;
                cells.push(CellSummary {
                    scenario,
                    strategy,
                    t,
                    mse: a.sq / n,
                    bias: a.err / n,
                    coverage: a.covered as f64 / n,
                    coverage_gmm: a.covered_gmm as f64 / n,
                    replications: a.count,
                });
            }
        }
    }
    cells
}

/// Human-readable table: MSE × 10² and coverage in percent.
pub fn summary_table(result: &StudyResult) -> String {
    let mut s = String::new();
    let spec = &result.spec;
    for st in &result.strength {
        let f: Vec<String> = st.mean_conditional_f.iter().map(|v| format!("{v:.3}")).collect();
        s.push_str(&format!(
            "scenario {}: mean conditional F ({} replications): {}\n",
            st.exposure,
            st.replications,
            f.join(", ")
        ));
    }
    s.push_str(&format!("failed replications: {}\n\n", result.failures.len()));
    let header: Vec<String> = spec.checkpoints.iter().map(|t| format!("t={t}")).collect();
    for metric in ["MSE (1e-2)", "Coverage (%)"] {
        s.push_str(&format!("{metric}\n{:<10}{:<14}", "scenario", "strategy"));
        for h in &header {
            s.push_str(&format!("{h:>10}"));
        }
        s.push('\n');
        for scenario in spec.scenarios() {
            for &strategy in &spec.strategies {
                s.push_str(&format!("{:<10}{:<14}", scenario.to_string(), strategy.name()));
                for &t in &spec.checkpoints {
                    let v = result.cell(scenario, strategy, t).map_or(f64::NAN, |c| {
                        if metric.starts_with("MSE") {
                            100.0 * c.mse
                        } else {
                            100.0 * c.coverage
                        }
                    });
                    s.push_str(&format!("{v:>10.3}"));
                }
                s.push('\n');
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `study_result.json`, `summary.txt` and `replications.csv`.
pub fn write_study_outputs(dir: &Path, result: &StudyResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("study_result.json");
    let w = create_output(&path)?;
    serde_json::to_writer_pretty(w, result)
        .map_err(|e| Error::Numerical(format!("serialising {}: {e}", path.display())))?;
    let path = dir.join("summary.txt");
    std::fs::write(&path, summary_table(result)).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("replications.csv");
    let mut w = create_output(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "scenario,replication,strategy,t,truth,estimate,se,covered,covered_gmm").map_err(io)?;
    for r in &result.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario, r.replication, r.strategy, r.t, r.truth, r.estimate, r.se, r.covered as u8,
            r.covered_gmm as u8
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One row of plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub t: f64,
    pub beta_hat: f64,
    pub se: f64,
    pub gmm_lo: f64,
    pub gmm_hi: f64,
    pub lm_lo: f64,
    pub lm_hi: f64,
    pub beta_true: Option<f64>,
}

/// Curve, GMM band and LM band on the fit grid. Unbounded LM sides are
/// written as `-inf`/`inf`; a missing band as `NaN`.
pub fn emit_plot_data(
    path: &Path,
    fit: &MpcmrFit,
    band: Option<&LmBand>,
    truth: Option<&[f64]>,
) -> Result<()> {
    let m = fit.t.len();
    if band.is_some_and(|b| b.t.len() != m) || truth.is_some_and(|t| t.len() != m) {
        return Err(Error::Config("band or truth does not match the fit grid".into()));
    }
    let mut w = create_output(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "t,beta_hat,se,gmm_lo,gmm_hi,lm_lo,lm_hi").map_err(io)?;
    if truth.is_some() {
        write!(w, ",beta_true").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for i in 0..m {
        let (lo, hi) = match band {
            Some(b) => (
                if b.unbounded_lo[i] { f64::NEG_INFINITY } else { b.lo[i] },
                if b.unbounded_hi[i] { f64::INFINITY } else { b.hi[i] },
            ),
            None => (f64::NAN, f64::NAN),
        };
        write!(
            w,
            "{},{},{},{},{},{},{}",
            fit.t[i], fit.beta_curve[i], fit.se_curve[i], fit.gmm_lo[i], fit.gmm_hi[i], lo, hi
        )
        .map_err(io)?;
        if let Some(tr) = truth {
            write!(w, ",{}", tr[i]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`emit_plot_data`].
pub fn read_plot_data(path: &Path) -> Result<Vec<PlotRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    let expected = ["t", "beta_hat", "se", "gmm_lo", "gmm_hi", "lm_lo", "lm_hi"];
    let with_truth = headers.len() == 8 && &headers[7] == "beta_true";
    if headers.len() < 7 || headers.iter().take(7).ne(expected) || (headers.len() > 7 && !with_truth) {
        return Err(Error::parse(path, 1, format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        rows.push(PlotRow {
            t: v[0],
            beta_hat: v[1],
            se: v[2],
            gmm_lo: v[3],
            gmm_hi: v[4],
            lm_lo: v[5],
            lm_hi: v[6],
            beta_true: with_truth.then(|| v[7]),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scenarios: &[&str]) -> StudySpec {
        let s: Vec<Scenario> = scenarios.iter().map(|s| s.parse().unwrap()).collect();
        StudySpec {
            n: 600,
            j: 10,
            lm_points: 11,
            ..StudySpec::new(&s, 2, 5)
        }
    }

    #[test]
    fn spec_from_toml_defaults() {
        let spec = StudySpec::from_toml(
            "exposure_scenarios = [\"C\"]\noutcome_scenarios = [3]\nreplications = 4\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(spec.checkpoints, vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!(spec.strategies, Strategy::ALL.to_vec());
        assert_eq!(spec.lm_points, 41);
        assert_eq!(spec.n, 10_000);
        assert!(StudySpec::from_toml("exposure_scenarios = [\"C\"]\noutcome_scenarios = [3]\nreplications = 0\n").is_err());
        assert!(StudySpec::from_toml(
            "exposure_scenarios = [\"C\"]\noutcome_scenarios = [3]\nreplications = 1\ncheckpoints = [50.0]\n"
        )
        .is_err());
        assert!(StudySpec::from_toml("exposure_scenarios = [\"C\"]\noutcome_scenarios = [7]\nreplications = 1\n").is_err());
        assert!(StudySpec::from_toml(
            "exposure_scenarios = [\"C\"]\noutcome_scenarios = [1]\nreplications = 1\nstrategies = [\"mpcmr-poly\"]\n"
        )
        .is_ok());
    }

    #[test]
    fn replication_seeds_differ() {
        let a = replication_seed(1, 1, 0);
        assert_ne!(a, replication_seed(1, 1, 1));
        assert_ne!(a, replication_seed(1, 2, 0));
        assert_ne!(a, replication_seed(2, 1, 0));
    }

    #[test]
    fn band_coverage_rules() {
        assert!(band_covers(0.0, 1.0, false, false, 0.5));
        assert!(!band_covers(0.0, 1.0, false, false, 1.5));
        assert!(band_covers(0.0, 1.0, false, true, 1.5));
        assert!(!band_covers(f64::NAN, f64::NAN, false, false, 0.0));
    }

    #[test]
    fn always_covering_records_give_full_coverage() {
        let spec = tiny(&["A1"]);
        let sc: Scenario = "A1".parse().unwrap();
        let records: Vec<CheckpointRecord> = (0..7)
            .flat_map(|r| {
                spec.checkpoints.iter().map(move |&t| CheckpointRecord {
                    scenario: sc,
                    replication: r,
                    strategy: Strategy::MpcmrPoly,
                    t,
                    truth: 0.0,
                    estimate: 0.1 * r as f64,
                    se: 1.0,
                    covered: true,
                    covered_gmm: true,
                })
            })
            .collect();
        let cells = aggregate(&spec, &records);
        assert_eq!(cells.len(), 4);
        for c in cells {
            assert_eq!(c.coverage, 1.0);
            assert_eq!(c.replications, 7);
            assert!((c.mse - (0..7).map(|r| (0.1 * r as f64).powi(2)).sum::<f64>() / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn study_is_deterministic_across_thread_counts() {
        let mut spec = tiny(&["B1", "B3"]);
        spec.threads = Some(1);
        let a = run_study(&spec).unwrap();
        spec.threads = Some(3);
        let b = run_study(&spec).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.strength, b.strength);
        assert_eq!(a.records.len(), 2 * 2 * 3 * 4);
        assert!(a.cells.iter().all(|c| c.mse >= 0.0 && (0.0..=1.0).contains(&c.coverage)));
    }

    #[test]
    fn outputs_are_written() {
        let mut spec = tiny(&["C2"]);
        spec.replications = 1;
        let result = run_study(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_study_outputs(dir.path(), &result).unwrap();
        for f in ["study_result.json", "summary.txt", "replications.csv"] {
            assert!(dir.path().join(f).metadata().unwrap().len() > 0, "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join("study_result.json")).unwrap();
        let back: StudyResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back.cells.len(), result.cells.len());
    }
}
