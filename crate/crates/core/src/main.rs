use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use debt_hmm::error::{Error, Result};
use debt_hmm::io::{load_cohort, load_labels, load_params, save_cohort, save_labels, save_params, LabelMaps};
use debt_hmm::learning::{self, FitConfig, QsMode};
use debt_hmm::simulation::{sample_cohort, CohortSpec};
use debt_hmm::{DebtCase, StateSpaces};

#[derive(Parser)]
#[command(
    name = "debt-hmm",
    about = "Covariate-conditioned hidden Markov model of debtor behaviour",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CohortArgs {
    /// Observations CSV: case_id,t,B,T,X,D
    #[arg(long)]
    observations: PathBuf,
    /// Case table CSV: case_id,R
    #[arg(long)]
    cases: PathBuf,
    /// Label map JSON; defaults to first-appearance coding
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QsModeArg {
    Marginal,
    Joint,
}

impl From<QsModeArg> for QsMode {
    fn from(m: QsModeArg) -> Self {
        match m {
            QsModeArg::Marginal => QsMode::Marginal,
            QsModeArg::Joint => QsMode::Joint,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit model parameters to a cohort by EM
    Fit {
        #[command(flatten)]
        cohort: CohortArgs,
        /// Number of latent schemes
        #[arg(long, default_value_t = 2)]
        schemes: usize,
        /// Output parameter file (JSON)
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Optional fit report (JSON): traces and convergence status
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "qs-mode", value_enum, default_value = "marginal")]
        qs_mode: QsModeArg,
        /// Relative log-likelihood convergence tolerance
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long = "max-iter", default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        /// Comma-separated threshold candidates; "auto" builds them from the data
        #[arg(long = "alpha-grid", default_value = "auto")]
        alpha_grid: String,
        /// Dirichlet concentration for random initialization
        #[arg(long, default_value_t = 1.0)]
        concentration: f64,
    },
    /// Sample a synthetic cohort from a parameter file
    Simulate {
        /// Parameter file (JSON)
        #[arg(long)]
        params: PathBuf,
        /// Cohort spec (JSON)
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "out-observations")]
        out_observations: PathBuf,
        #[arg(long = "out-cases")]
        out_cases: PathBuf,
        /// Optional hidden scheme paths CSV: case_id,t,S
        #[arg(long = "out-hidden")]
        out_hidden: Option<PathBuf>,
        /// Optional label map output matching the generated cohort
        #[arg(long = "out-labels")]
        out_labels: Option<PathBuf>,
        /// Overrides the seed in the spec file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Smoothed scheme distributions per case and period
    Posterior {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        /// Output CSV: case_id,t,s,gamma (stdout if omitted)
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Total and per-case observed-data log-likelihood
    Loglik {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        /// Output CSV: case_id,loglik (stdout if omitted)
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Evaluate the threshold-selection objective over a grid
    AlphaScan {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long = "alpha-grid", default_value = "auto")]
        alpha_grid: String,
        /// Output CSV: alpha,l1 (stdout if omitted)
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
}

fn parse_grid(text: &str) -> Result<Option<Vec<f64>>> {
    if text == "auto" {
        return Ok(None);
    }
    let grid: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match grid {
        Ok(g) => Ok(Some(g)),
        Err(e) => Err(Error::Validation(vec![format!("bad alpha grid: {e}")])),
    }
}

/// Loads a cohort using the params file's embedded labels unless the user
/// supplied an explicit map, then checks codes fit the declared spaces.
fn load_cohort_for(
    args: &CohortArgs,
    spaces: &StateSpaces,
    params_labels: Option<&LabelMaps>,
) -> Result<Vec<DebtCase>> {
    let explicit = match &args.labels {
        Some(path) => Some(load_labels(path)?),
        None => params_labels.cloned(),
    };
    let (cohort, _, _) = load_cohort(&args.observations, &args.cases, explicit.as_ref())?;
    let mut errs = Vec::new();
    for case in &cohort {
        if let Err(Error::Validation(mut e)) = debt_hmm::validate_case(case, spaces) {
            errs.append(&mut e);
        }
    }
    if errs.is_empty() {
        Ok(cohort)
    } else {
        Err(Error::Validation(errs))
    }
}

fn open_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

#[derive(Serialize)]
struct ReportDoc {
    converged: bool,
    iterations: usize,
    restart_index: usize,
    final_loglik: f64,
    alpha: f64,
    loglik_trace: Vec<f64>,
    alpha_trace: Vec<f64>,
    l1_trace: Vec<f64>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            cohort,
            schemes,
            out,
            report,
            seed,
            qs_mode,
            tol,
            max_iter,
            restarts,
            alpha_grid,
            concentration,
        } => {
            let explicit = match &cohort.labels {
                Some(path) => Some(load_labels(path)?),
                None => None,
            };
            let (cases, mut spaces, labels) =
                load_cohort(&cohort.observations, &cohort.cases, explicit.as_ref())?;
            spaces.n_scheme = schemes;
            spaces.validate()?;
            let config = FitConfig {
                max_iterations: max_iter,
                loglik_rel_tol: tol,
                alpha_grid: parse_grid(&alpha_grid)?,
                qs_mode: qs_mode.into(),
                seed,
                n_restarts: restarts,
                dirichlet_concentration: concentration,
            };
            let fitted = learning::fit(&cases, &spaces, &config)?;
            save_params(&out, &fitted.params, &spaces, Some(&labels))?;
            let final_loglik = *fitted.loglik_trace.last().unwrap();
            if let Some(report_path) = report {
                let doc = ReportDoc {
                    converged: fitted.converged,
                    iterations: fitted.iterations,
                    restart_index: fitted.restart_index,
                    final_loglik,
                    alpha: fitted.params.alpha,
                    loglik_trace: fitted.loglik_trace,
                    alpha_trace: fitted.alpha_trace,
                    l1_trace: fitted.l1_trace,
                };
                let mut sink = open_sink(Some(&report_path))?;
                serde_json::to_writer_pretty(&mut sink, &doc)?;
                sink.write_all(b"\n")?;
            }
            eprintln!(
                "fit: {} iterations, converged = {}, alpha = {}, loglik = {}",
                fitted.iterations, fitted.converged, fitted.params.alpha, final_loglik
            );
            Ok(())
        }
        Command::Simulate {
            params,
            spec,
            out_observations,
            out_cases,
            out_hidden,
            out_labels,
            seed,
        } => {
            let (model, spaces, labels) = load_params(&params)?;
            let mut spec: CohortSpec = serde_json::from_reader(std::fs::File::open(&spec)?)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let (cohort, hidden) = sample_cohort(&model, &spaces, &spec)?;
            let labels = labels.unwrap_or_else(|| LabelMaps::numeric(&spaces));
            save_cohort(&out_observations, &out_cases, &cohort, &labels)?;
            if let Some(path) = out_hidden {
                let mut sink = open_sink(Some(&path))?;
                writeln!(sink, "case_id,t,S")?;
                for (case, schemes) in cohort.iter().zip(&hidden) {
                    for (k, &s) in schemes.iter().enumerate() {
                        writeln!(sink, "{},{},{}", case.case_id, case.u + k as i64, s)?;
                    }
                }
            }
            if let Some(path) = out_labels {
                save_labels(&path, &labels)?;
            }
            eprintln!("simulate: {} cases written", cohort.len());
            Ok(())
        }
        Command::Posterior { params, cohort, out } => {
            let (model, spaces, labels) = load_params(&params)?;
            let cases = load_cohort_for(&cohort, &spaces, labels.as_ref())?;
            let mut sink = open_sink(out.as_deref())?;
            writeln!(sink, "case_id,t,s,gamma")?;
            for case in &cases {
                let post = debt_hmm::posterior(case, &model, &spaces)?;
                for (k, dist) in post.gamma.iter().enumerate() {
                    for (s, &g) in dist.iter().enumerate() {
                        writeln!(sink, "{},{},{},{}", case.case_id, case.u + k as i64, s, g)?;
                    }
                }
            }
            Ok(())
        }
        Command::Loglik { params, cohort, out } => {
            let (model, spaces, labels) = load_params(&params)?;
            let cases = load_cohort_for(&cohort, &spaces, labels.as_ref())?;
            let (posteriors, total) = learning::e_step(&cases, &model, &spaces)?;
            let mut sink = open_sink(out.as_deref())?;
            writeln!(sink, "case_id,loglik")?;
            for (case, post) in cases.iter().zip(&posteriors) {
                writeln!(sink, "{},{}", case.case_id, post.log_likelihood)?;
            }
            drop(sink);
            println!("total,{total}");
            Ok(())
        }
        Command::AlphaScan {
            params,
            cohort,
            alpha_grid,
            out,
        } => {
            let (model, spaces, labels) = load_params(&params)?;
            let cases = load_cohort_for(&cohort, &spaces, labels.as_ref())?;
            let (posteriors, _) = learning::e_step(&cases, &model, &spaces)?;
            let grid = match parse_grid(&alpha_grid)? {
                Some(g) => g,
                None => learning::build_auto_grid(&cases)?,
            };
            let (best, _, values) =
                learning::alpha_scan(&cases, &posteriors, &grid, &model.q_b, &spaces)?;
            let mut sink = open_sink(out.as_deref())?;
            writeln!(sink, "alpha,l1")?;
            for (alpha, l1) in grid.iter().zip(&values) {
                writeln!(sink, "{alpha},{l1}")?;
            }
            drop(sink);
            eprintln!("alpha-scan: best alpha = {best}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
