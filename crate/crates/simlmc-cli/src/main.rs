//! Command-line driver: screening, adaptive MLMC/MC runs, and the fast
//! validation suite, with CSV outputs for every table.

mod checks;
mod config;
mod csvout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use config::ExperimentConfig;
use csvout::{fmt_f, Csv};
use simlmc::field::build_kle;
use simlmc::material::{delta_t_from_delta_c, FluctuationSampler};
use simlmc::error::MlmcError;
use simlmc::mlmc::{
    fit_rates, run_mc, run_mlmc, screening, Estimand, Method, RatePoint, RatesFit, RunOptions,
    RunReport, Screening, Targets,
};
use simlmc::problem::ElasticityProblem;

#[derive(Parser)]
#[command(
    name = "simlmc",
    about = "Scale-invariant multilevel Monte Carlo for 2D elasticity with random anisotropic material",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output.dir or ".").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rayon worker threads (defaults to the hardware count).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fixed-sample screening pilot; writes screening.csv and
    /// rates.csv.
    Screen {
        #[command(flatten)]
        common: CommonArgs,
        /// Fit rates from synthetic power-law constants (JSON) instead of
        /// solving; exercises the fitting path in isolation.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Full experiment: screening, adaptive MLMC and MC runs per target;
    /// writes allocation.csv, errors.csv, cost.csv and estimates.csv.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Single-level Monte Carlo baseline only, same output files.
    Mc {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fast invariant checks (dispersion round trip, SPD sampling, patch
    /// test, enumeration oracles); exits nonzero on any failure.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Screen { common, synthetic } => cmd_screen(&common, synthetic.as_deref()),
        Command::Run { common } => cmd_run(&common),
        Command::Mc { common } => cmd_mc(&common),
        Command::Validate { common } => cmd_validate(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

fn setup(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    if let Some(n) = common.threads {
        // ignore the error if a pool already exists (second call in-process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| CliError::config(e.0))?;
    if let Some(seed) = common.seed {
        cfg.mlmc.master_seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, out))
}

fn build_problem(cfg: &ExperimentConfig) -> Result<ElasticityProblem<f64>, CliError> {
    let hierarchy = cfg.hierarchy().map_err(|e| CliError::config(e.0))?;
    let mean = cfg.mean_elasticity().map_err(|e| CliError::config(e.0))?;
    let kernel = cfg.kernel().map_err(|e| CliError::config(e.0))?;
    let n_finest = hierarchy.finest().n_nodes();
    if cfg.material.kle_modes > n_finest {
        return Err(CliError::config(format!(
            "material.kle_modes = {} exceeds the finest mesh node count {n_finest}",
            cfg.material.kle_modes
        )));
    }
    let basis = build_kle(&kernel, hierarchy.finest(), cfg.material.kle_modes)
        .map_err(|e| CliError::config(format!("KLE construction failed: {e}")))?;
    let delta_t = delta_t_from_delta_c(cfg.material.delta_c, &mean)
        .map_err(|e| CliError::config(format!("dispersion calibration: {e}")))?;
    let sampler =
        FluctuationSampler::new(delta_t).map_err(|e| CliError::config(format!("{e}")))?;
    ElasticityProblem::new(
        hierarchy,
        basis,
        mean,
        sampler,
        cfg.load.resultant,
        cfg.mlmc.master_seed,
    )
    .map_err(|e| CliError::config(format!("problem setup failed: {e}")))
}

fn map_run_err(e: MlmcError) -> CliError {
    match e {
        MlmcError::NoConvergence { .. } => CliError {
            code: EXIT_NO_CONVERGENCE,
            message: e.to_string(),
        },
        other => CliError::config(other.to_string()),
    }
}

/// On non-convergence, leave a diagnostics file next to the outputs.
fn with_diagnostics(out: &std::path::Path, e: CliError) -> CliError {
    if e.code == EXIT_NO_CONVERGENCE {
        let _ = std::fs::create_dir_all(out);
        let _ = std::fs::write(
            out.join("diagnostics.txt"),
            format!("adaptive run did not converge\n{}\n", e.message),
        );
    }
    e
}

// ---------------------------------------------------------------------------
// screen
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticRates {
    alpha: f64,
    c8: f64,
    beta: f64,
    c2: f64,
    gamma: f64,
    c3: f64,
    alpha_v: f64,
    c9: f64,
    beta_v: f64,
    c6: f64,
    #[serde(default = "default_levels")]
    levels: usize,
    #[serde(default = "default_h0")]
    h0: f64,
}

fn default_levels() -> usize {
    4
}
fn default_h0() -> f64 {
    3.5
}

fn cmd_screen(common: &CommonArgs, synthetic: Option<&std::path::Path>) -> Result<(), CliError> {
    let (cfg, out) = setup(common)?;
    let points: Vec<RatePoint<f64>> = if let Some(path) = synthetic {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let syn: SyntheticRates = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        (0..syn.levels)
            .map(|l| {
                let h = syn.h0 / 2f64.powi(l as i32);
                RatePoint {
                    level: l,
                    h,
                    mean_y: syn.c8 * h.powf(syn.alpha),
                    v_l: syn.c2 * h.powf(syn.beta),
                    z_l: syn.c9 * h.powf(syn.alpha_v),
                    v_l2: syn.c6 * h.powf(syn.beta_v),
                    cost: syn.c3 * h.powf(-syn.gamma),
                }
            })
            .collect()
    } else {
        let problem = build_problem(&cfg)?;
        let scr = screening(&problem, cfg.mlmc.n_screen).map_err(map_run_err)?;
        eprintln!(
            "screening: {} samples/level, {} solves, report node {}",
            scr.n_screen, scr.solves, scr.report_node
        );
        scr.rate_points()
    };
    write_screening_csv(&points, &out)?;
    let rates = fit_rates(&points).map_err(map_run_err)?;
    write_rates_csv(&rates, &out)?;
    eprintln!(
        "rates: alpha = {:.4}, beta = {:.4}, gamma = {:.4}, regime = {}",
        rates.alpha,
        rates.beta,
        rates.gamma,
        rates.regime.label()
    );
    Ok(())
}

fn write_screening_csv(points: &[RatePoint<f64>], out: &std::path::Path) -> Result<(), CliError> {
    let mut csv = Csv::new("level,h_l,mean_Y,V_l,Z_l,V_l2,C_l");
    for p in points {
        csv.row(&[
            p.level.to_string(),
            fmt_f(p.h),
            fmt_f(p.mean_y),
            fmt_f(p.v_l),
            fmt_f(p.z_l),
            fmt_f(p.v_l2),
            fmt_f(p.cost),
        ]);
    }
    csv.write(out, "screening.csv")
        .map_err(|e| CliError::config(format!("cannot write screening.csv: {e}")))
}

fn write_rates_csv(r: &RatesFit<f64>, out: &std::path::Path) -> Result<(), CliError> {
    let mut csv = Csv::new("alpha,beta,gamma,alpha_v,beta_v,c8,c2,c3,c9,c6,cond_mean,cond_var,regime");
    csv.row(&[
        fmt_f(r.alpha),
        fmt_f(r.beta),
        fmt_f(r.gamma),
        fmt_f(r.alpha_v),
        fmt_f(r.beta_v),
        fmt_f(r.c8),
        fmt_f(r.c2),
        fmt_f(r.c3),
        fmt_f(r.c9),
        fmt_f(r.c6),
        r.cond_mean.to_string(),
        r.cond_var.to_string(),
        r.regime.label().to_string(),
    ]);
    csv.write(out, "rates.csv")
        .map_err(|e| CliError::config(format!("cannot write rates.csv: {e}")))
}

// ---------------------------------------------------------------------------
// run / mc
// ---------------------------------------------------------------------------

struct OutputTables {
    allocation: Csv,
    errors: Csv,
    cost: Csv,
}

impl OutputTables {
    fn new() -> Self {
        Self {
            allocation: Csv::new("target,estimand,level,N_l"),
            errors: Csv::new("target,estimand,specified,achieved_normalized,achieved_absolute"),
            cost: Csv::new("method,estimand,target,cost_seconds"),
        }
    }

    fn record(&mut self, target: f64, report: &RunReport<f64>) {
        let estimand = report.estimand.label();
        if report.method == Method::Mlmc {
            for (level, n) in report.levels.iter().zip(&report.n_l) {
                self.allocation
                    .row(&[fmt_f(target), estimand.into(), level.to_string(), n.to_string()]);
            }
            let (norm, abs) = match report.estimand {
                Estimand::Variance => (
                    report.achieved_evs.unwrap_or(f64::NAN),
                    report.achieved_abs_var.unwrap_or(f64::NAN),
                ),
                _ => (
                    report.achieved_es.unwrap_or(f64::NAN),
                    report.achieved_abs_mean.unwrap_or(f64::NAN),
                ),
            };
            self.errors.row(&[
                fmt_f(target),
                estimand.into(),
                fmt_f(target),
                fmt_f(norm),
                fmt_f(abs),
            ]);
        }
        self.cost.row(&[
            report.method.label().into(),
            estimand.into(),
            fmt_f(target),
            fmt_f(report.total_cost),
        ]);
    }

    fn write(&self, out: &std::path::Path) -> Result<(), CliError> {
        self.allocation
            .write(out, "allocation.csv")
            .and_then(|_| self.errors.write(out, "errors.csv"))
            .and_then(|_| self.cost.write(out, "cost.csv"))
            .map_err(|e| CliError::config(format!("cannot write output tables: {e}")))
    }
}

fn write_estimates_csv(
    problem: &ElasticityProblem<f64>,
    report: &RunReport<f64>,
    out: &std::path::Path,
) -> Result<(), CliError> {
    let coords = problem.hierarchy.common_coords();
    let mut csv = Csv::new("node,x,y,mean,variance");
    for (node, p) in coords.iter().enumerate() {
        csv.row(&[
            node.to_string(),
            fmt_f(p[0]),
            fmt_f(p[1]),
            fmt_f(report.mean[node]),
            fmt_f(report.variance[node]),
        ]);
    }
    csv.write(out, "estimates.csv")
        .map_err(|e| CliError::config(format!("cannot write estimates.csv: {e}")))
}

fn targets_for(cfg: &ExperimentConfig, eps: f64) -> Targets<f64> {
    Targets {
        eps_s_sq_half: eps,
        eps_vs_sq_half: eps,
        level_max: cfg.geometry.levels,
    }
}

fn cmd_run(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, out) = setup(common)?;
    let problem = build_problem(&cfg)?;
    let scr: Screening<f64> = screening(&problem, cfg.mlmc.n_screen).map_err(map_run_err)?;
    write_screening_csv(&scr.rate_points(), &out)?;
    if let Ok(rates) = scr.rates() {
        write_rates_csv(&rates, &out)?;
    }

    let mut tables = OutputTables::new();
    let mut phase = 1u64;
    let mut estimates_source: Option<(f64, RunReport<f64>)> = None;
    for &eps in &cfg.mlmc.targets {
        let targets = targets_for(&cfg, eps);
        for estimand in [Estimand::Mean, Estimand::Variance] {
            let opts = RunOptions {
                phase,
                max_iterations: cfg.mlmc.max_iterations,
            };
            phase += 1;
            let mlmc = run_mlmc(&problem, &scr, &targets, estimand, &opts)
                .map_err(|e| with_diagnostics(&out, map_run_err(e)))?;
            eprintln!(
                "MLMC {} @ {eps:.1e}: N = {:?}, cost = {:.3} s",
                estimand.label(),
                mlmc.n_l,
                mlmc.total_cost
            );
            tables.record(eps, &mlmc);
            // node estimates come from the variance-mode run at the
            // tightest target
            if estimand == Estimand::Variance
                && estimates_source.as_ref().map_or(true, |(e, _)| eps < *e)
            {
                estimates_source = Some((eps, mlmc));
            }

            let opts = RunOptions {
                phase,
                max_iterations: cfg.mlmc.max_iterations,
            };
            phase += 1;
            let mc = run_mc(&problem, &scr, &targets, estimand, &opts)
                .map_err(|e| with_diagnostics(&out, map_run_err(e)))?;
            eprintln!(
                "MC   {} @ {eps:.1e}: N = {:?}, cost = {:.3} s",
                estimand.label(),
                mc.n_l,
                mc.total_cost
            );
            tables.record(eps, &mc);
        }
    }
    tables.write(&out)?;
    if let Some((_, report)) = estimates_source {
        write_estimates_csv(&problem, &report, &out)?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_mc(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, out) = setup(common)?;
    let problem = build_problem(&cfg)?;
    let scr: Screening<f64> = screening(&problem, cfg.mlmc.n_screen).map_err(map_run_err)?;

    let mut tables = OutputTables::new();
    let mut phase = 1u64;
    let mut estimates_source: Option<RunReport<f64>> = None;
    for &eps in &cfg.mlmc.targets {
        let targets = targets_for(&cfg, eps);
        for estimand in [Estimand::Mean, Estimand::Variance] {
            let opts = RunOptions {
                phase,
                max_iterations: cfg.mlmc.max_iterations,
            };
            phase += 1;
            let mc = run_mc(&problem, &scr, &targets, estimand, &opts)
                .map_err(|e| with_diagnostics(&out, map_run_err(e)))?;
            eprintln!(
                "MC {} @ {eps:.1e}: N = {:?}, cost = {:.3} s",
                estimand.label(),
                mc.n_l,
                mc.total_cost
            );
            // level-L allocation and achieved errors for the baseline
            for (level, n) in mc.levels.iter().zip(&mc.n_l) {
                tables.allocation.row(&[
                    fmt_f(eps),
                    estimand.label().into(),
                    level.to_string(),
                    n.to_string(),
                ]);
            }
            let (norm, abs) = match estimand {
                Estimand::Variance => (
                    mc.achieved_evs.unwrap_or(f64::NAN),
                    mc.achieved_abs_var.unwrap_or(f64::NAN),
                ),
                _ => (
                    mc.achieved_es.unwrap_or(f64::NAN),
                    mc.achieved_abs_mean.unwrap_or(f64::NAN),
                ),
            };
            tables.errors.row(&[
                fmt_f(eps),
                estimand.label().into(),
                fmt_f(eps),
                fmt_f(norm),
                fmt_f(abs),
            ]);
            tables.cost.row(&[
                mc.method.label().into(),
                estimand.label().into(),
                fmt_f(eps),
                fmt_f(mc.total_cost),
            ]);
            if estimand == Estimand::Variance && estimates_source.is_none() {
                estimates_source = Some(mc);
            }
        }
    }
    tables
        .allocation
        .write(&out, "allocation.csv")
        .and_then(|_| tables.errors.write(&out, "errors.csv"))
        .and_then(|_| tables.cost.write(&out, "cost.csv"))
        .map_err(|e| CliError::config(format!("cannot write output tables: {e}")))?;
    if let Some(report) = estimates_source {
        write_estimates_csv(&problem, &report, &out)?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_validate(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, _) = setup(common)?;
    let outcomes = checks::run_all(&cfg);
    let mut all_ok = true;
    for c in &outcomes {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", c.name, c.detail);
        all_ok &= c.passed;
    }
    if all_ok {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::config("validation checks failed".to_string()))
    }
}
