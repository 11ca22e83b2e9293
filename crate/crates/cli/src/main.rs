use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tvmr::basis::{make_basis, BasisFamily, BasisSet};
use tvmr::diagnostics::{
    cochran_q, compute_summary_stats, conditional_f, genetic_assoc_curve, q_strength, sargan,
    SampleSplit,
};
use tvmr::fpca::{fit_fpca, FpcaModel, FpcaOptions};
use tvmr::grid::{TimeGrid, DEFAULT_GRID_POINTS};
use tvmr::longdata::{load_individual_data, IndividualData};
use tvmr::mpcmr::{fit_association, fit_mpcmr, GmmProblem, MpcmrFit};
use tvmr::robust::{lm_confidence, DeltaEstimator, LmBand, LmOptions, DEFAULT_LM_POINTS};
use tvmr::simgen::{gen_dataset, write_simulation, Scenario, SimConfig};
use tvmr::study::{emit_plot_data, run_study, summary_table, write_study_outputs, StudySpec};
use tvmr::{Bandwidth, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "tvmr", version, about = "Time-varying Mendelian randomization with sparse exposure data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated cohort
    Simulate(SimulateArgs),
    /// Fit the effect function on individual-level data
    Fit(FitArgs),
    /// Instrument strength and validity diagnostics
    Diagnose(DiagnoseArgs),
    /// Run a Monte-Carlo study
    Study(StudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Exposure and outcome scenario, e.g. A3
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Number of genetic variants
    #[arg(long, default_value_t = 30)]
    j: usize,
    #[arg(long, default_value_t = 10)]
    obs_per_subject: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed for the genetic-effect coefficients, held fixed across `--seed`
    #[arg(long, value_name = "SEED")]
    fix_genetic_effects: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    exposure: PathBuf,
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    outcome: PathBuf,
    /// Observation window; measurements outside it are dropped
    #[arg(long, num_args = 2, value_names = ["T_MIN", "T_MAX"])]
    window: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.95)]
    fve: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
    /// Cap on the number of principal components
    #[arg(long)]
    max_components: Option<usize>,
    /// Fixed bandwidth for the mean smoother (default: GCV)
    #[arg(long)]
    mean_bandwidth: Option<f64>,
    /// Fixed bandwidth for the covariance smoother (default: GCV)
    #[arg(long)]
    cov_bandwidth: Option<f64>,
    #[arg(long, default_value = "eigen")]
    basis: BasisFamily,
    /// Number of basis functions (default: K for eigen, 2 for poly)
    #[arg(long = "L")]
    l: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Cue,
    Association,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeltaArg {
    Homoskedastic,
    Pointwise,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "cue")]
    estimator: EstimatorArg,
    /// LM grid points per coefficient (odd)
    #[arg(long, default_value_t = DEFAULT_LM_POINTS)]
    lm_m: usize,
    /// Double the LM search window once if the region reaches its edge
    #[arg(long)]
    lm_expand: bool,
    #[arg(long, value_enum, default_value = "homoskedastic")]
    lm_delta: DeltaArg,
    /// Plot data: t, estimate, GMM and LM bands
    #[arg(long)]
    out: PathBuf,
    /// Save the FPCA model as JSON
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Validity {
    Q,
    Sargan,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "q")]
    validity: Validity,
    /// Subject ids (one per line) of the exposure sample; default all
    #[arg(long)]
    exposure_sample: Option<PathBuf>,
    /// Subject ids (one per line) of the outcome sample; default all
    #[arg(long)]
    outcome_sample: Option<PathBuf>,
    /// Per-variant genetic association curves
    #[arg(long)]
    alpha_out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// TOML study specification
    #[arg(long)]
    spec: PathBuf,
    /// Override the number of worker threads
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Parse { .. } | Error::Io { .. } | Error::Data(_) => EXIT_DATA,
        Error::Numerical(_) | Error::Identification(_) => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Study(a) => study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn simulate(a: SimulateArgs) -> tvmr::Result<()> {
    let config = SimConfig {
        n: a.n,
        j: a.j,
        obs_per_subject: a.obs_per_subject,
        seed: a.seed,
        genetic_effects_seed: a.fix_genetic_effects,
        ..SimConfig::default()
    }
    .with_scenario(a.scenario);
    let dataset = gen_dataset(&config)?;
    write_simulation(&a.out, &dataset)?;
    println!("wrote scenario {} with {} subjects to {}", a.scenario, a.n, a.out.display());
    Ok(())
}

struct Prepared {
    data: IndividualData,
    model: FpcaModel,
    basis: BasisSet,
}

fn prepare(a: &DataArgs) -> tvmr::Result<Prepared> {
    let window = match a.window.as_deref() {
        Some([lo, hi]) => Some((*lo, *hi)),
        _ => None,
    };
    let data = load_individual_data(&a.exposure, &a.genotype, &a.outcome, window)?;
    info!(
        "{} subjects, {} measurements, {} variants",
        data.exposure.n_subjects(),
        data.exposure.n_measurements(),
        data.genotype.n_variants()
    );
    let grid = TimeGrid::new(data.exposure.t_min(), data.exposure.t_max(), a.grid_points)?;
    let bw = |b: Option<f64>| b.map_or(Bandwidth::Auto, Bandwidth::Fixed);
    let options = FpcaOptions {
        fve_threshold: a.fve,
        mean_bandwidth: bw(a.mean_bandwidth),
        cov_bandwidth: bw(a.cov_bandwidth),
        min_components: None,
        max_components: a.max_components,
    };
    let model = fit_fpca(&data.exposure, &grid, &options)?;
    let l = a.l.unwrap_or(match a.basis {
        BasisFamily::Eigen => model.n_components(),
        BasisFamily::Poly => 2,
    });
    let basis = make_basis(a.basis.with_size(l), l, &model)?;
    Ok(Prepared { data, model, basis })
}

fn print_model(model: &FpcaModel) {
    let fve: Vec<String> = model.fve.iter().map(|f| format!("{f:.4}")).collect();
    println!("components: {}  cumulative FVE: {}", model.n_components(), fve.join(" "));
}

fn fit(a: FitArgs) -> tvmr::Result<()> {
    let p = prepare(&a.data)?;
    print_model(&p.model);
    if let Some(path) = &a.model_out {
        p.model.save(path)?;
    }
    let y = p.data.outcome.values();
    let (fit, band): (MpcmrFit, Option<LmBand>) = match a.estimator {
        EstimatorArg::Association => {
            let xi = tvmr::basis::transform_scores(&p.model.scores, &p.basis)?;
            (fit_association(&xi, y, &p.basis)?, None)
        }
        EstimatorArg::Cue => {
            let problem = GmmProblem::from_scores(p.data.genotype.dosages(), &p.model.scores, y, &p.basis)?;
            let fit = fit_mpcmr(&problem, &p.basis)?;
            let options = LmOptions {
                m: a.lm_m,
                expand: a.lm_expand,
                delta: match a.lm_delta {
                    DeltaArg::Homoskedastic => DeltaEstimator::Homoskedastic,
                    DeltaArg::Pointwise => DeltaEstimator::Pointwise,
                },
                ..LmOptions::default()
            };
            let (_, band) = lm_confidence(&problem, &fit, &p.basis, &options)?;
            (fit, Some(band))
        }
    };
    for (k, g) in fit.gamma_hat.iter().enumerate() {
        println!("gamma[{k}] = {g:.6} (se {:.6})", fit.sigma_hat[(k, k)].max(0.0).sqrt());
    }
    println!("objective: {:.6}", fit.objective_value);
    emit_plot_data(&a.out, &fit, band.as_ref(), None)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn read_ids(path: &Path) -> tvmr::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn diagnose(a: DiagnoseArgs) -> tvmr::Result<()> {
    let p = prepare(&a.data)?;
    print_model(&p.model);
    let z = p.data.genotype.dosages();
    let y = p.data.outcome.values();
    let ids = p.data.genotype.subject_ids();
    let split = match (&a.exposure_sample, &a.outcome_sample) {
        (None, None) => SampleSplit::full(ids.len()),
        (e, o) => {
            let e = e.as_deref().map(read_ids).transpose()?.unwrap_or_else(|| ids.to_vec());
            let o = o.as_deref().map(read_ids).transpose()?.unwrap_or_else(|| ids.to_vec());
            SampleSplit::from_ids(ids, &e, &o)?
        }
    };
    let stats = compute_summary_stats(z, &p.model.scores, y, &split)?;
    let k = p.model.n_components();
    println!("{:<6}{:>16}{:>16}", "PC", "conditional F", "strength Q p");
    for c in 0..k {
        let f = conditional_f(&p.model.scores, z, c)?;
        let q = if k >= 2 {
            format!("{:.4e}", q_strength(&stats, c)?.p_value)
        } else {
            "-".to_string()
        };
        println!("{:<6}{f:>16.3}{q:>16}", c + 1);
    }
    match a.validity {
        Validity::Q => {
            let q = cochran_q(&stats, &p.basis)?;
            println!(
                "validity Q: {:.4} on {} df, p = {:.4e} ({} iterations{})",
                q.statistic,
                q.df,
                q.p_value,
                q.iterations,
                if q.converged { "" } else { ", not converged" }
            );
        }
        Validity::Sargan => {
            let problem = GmmProblem::from_scores(z, &p.model.scores, y, &p.basis)?;
            let fit = fit_mpcmr(&problem, &p.basis)?;
            let s = sargan(&problem, &fit.gamma_hat)?;
            println!("Sargan: {:.4} on {} df, p = {:.4e}", s.statistic, s.df, s.p_value);
        }
    }
    if let Some(path) = &a.alpha_out {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?);
        let io = |e| Error::Io {
            path: path.clone(),
            source: e,
        };
        let variants = p.data.genotype.variant_ids();
        write!(w, "t").map_err(io)?;
        for v in variants {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        let curves: Vec<Vec<f64>> = (0..variants.len())
            .map(|j| {
                let row: Vec<f64> = stats.alpha_hat.row(j).iter().copied().collect();
                genetic_assoc_curve(&row, &p.model)
            })
            .collect();
        for (i, t) in p.model.grid.points().iter().enumerate() {
            write!(w, "{t}").map_err(io)?;
            for c in &curves {
                write!(w, ",{}", c[i]).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

fn study(a: StudyArgs) -> tvmr::Result<()> {
    let mut spec = StudySpec::load(&a.spec)?;
    if a.threads.is_some() {
        spec.threads = a.threads;
        spec.validate()?;
    }
    let result = run_study(&spec)?;
    write_study_outputs(&a.out, &result)?;
    print!("{}", summary_table(&result));
    Ok(())
}
