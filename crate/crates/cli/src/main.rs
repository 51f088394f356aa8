//! Command-line front end: single runs, convergence and residual studies,
//! and one-off proximal steps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use labelflow::explicit_scheme::LabelMode;
use labelflow::harness::{
    convergence_study, export_report, export_trajectory, load_scenario, residual_study, run_scenario, ReportFormat,
    Scenario, StudyOptions, StudyReport,
};
use labelflow::label_geometry::{LabelDistribution, LabelMetricSpace};
use labelflow::markov_geometry::MarkovGeometry;
use labelflow::markov_prox::{el_residual_markov, markov_label_step};
use labelflow::par;
use labelflow::replicator_prox::{el_residual_hs_payoff, prox_hs_payoff, HsConvention};
use labelflow::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_ABORT: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "labelflow", version, about = "Particle schemes for spatial games with label dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and optionally export snapshot tables.
    Simulate(SimulateArgs),
    /// Convergence or residual study over a list of step counts.
    Study(StudyArgs),
    /// Single proximal steps for debugging.
    Prox {
        #[command(subcommand)]
        command: ProxCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Explicit,
    ProxHellinger,
    ProxMarkov,
}

impl From<Mode> for LabelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Explicit => LabelMode::Explicit,
            Mode::ProxHellinger => LabelMode::ProxHellinger,
            Mode::ProxMarkov => LabelMode::ProxMarkov,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, or `pinned` for a sequential, byte-reproducible run.
    #[arg(long)]
    threads: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; guessed from the `--out` extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKindArg {
    Convergence,
    Residual,
}

#[derive(Args)]
struct StudyArgs {
    kind: StudyKindArg,
    scenario: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128])]
    ks: Vec<usize>,
    /// Compare against the closed-form solution instead of the 2k run.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProxMode {
    Hellinger,
    Markov,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Geodesic,
    Literal,
}

#[derive(Subcommand)]
enum ProxCommand {
    /// Evaluate one proximal step and its Euler-Lagrange residual.
    Eval {
        #[arg(long, value_enum)]
        mode: ProxMode,
        /// Current label, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        lambda_hat: Vec<f64>,
        #[arg(long)]
        tau: f64,
        /// Payoff vector for the Hellinger step.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        payoff: Vec<f64>,
        /// Rate matrix for the Markov step, rows separated by `;`.
        #[arg(long, allow_hyphen_values = true)]
        rates: Option<String>,
        #[arg(long, value_enum, default_value = "geodesic")]
        convention: Convention,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_VALIDATION, message: message.into() }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::GuardFailure { .. }
        | Error::SimplexViolation { .. }
        | Error::FieldEvaluation { .. }
        | Error::NearSingularMetric { .. } => EXIT_ABORT,
        Error::ProxNonConvergence { .. } | Error::GeodesicFailure(_) => EXIT_NONCONVERGENCE,
        _ => EXIT_VALIDATION,
    }
}

/// Applies `--threads`; returns whether the run is pinned.
fn configure_threads(threads: Option<&str>) -> Result<bool, Failure> {
    match threads {
        None => Ok(false),
        Some("pinned") => {
            par::set_sequential(true);
            Ok(true)
        }
        Some(s) => {
            let n: usize = s.parse().map_err(|_| validation(format!("--threads expects an integer or `pinned`, got `{s}`")))?;
            par::set_threads(n).map_err(validation)?;
            Ok(false)
        }
    }
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut sc = load_scenario(path)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn format_for(common: &Common, out: &std::path::Path) -> ReportFormat {
    common.format.map(Into::into).unwrap_or_else(|| ReportFormat::from_path(out))
}

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    configure_threads(args.common.threads.as_deref())?;
    let sc = load(&args.scenario, args.common.seed)?;
    let mode = args.common.mode.map(Into::into).unwrap_or(sc.mode);
    let k = args.k.unwrap_or(sc.k);
    let outcome = run_scenario(&sc, k, mode)?;
    let traj = &outcome.trajectory;
    if let Some(out) = &args.common.out {
        export_trajectory(traj, format_for(&args.common, out), out)?;
    }
    let termination = traj.termination();
    print(&json!({
        "scenario": sc.name,
        "mode": mode,
        "k": k,
        "tau": traj.config().tau(),
        "steps": traj.steps(),
        "end_time": traj.end_time(),
        "termination": termination,
    }));
    if let Some(t) = termination {
        return Err(Failure {
            code: EXIT_ABORT,
            message: format!(
                "label margin violated by agent {} at step {} (min component {:e}); stopped at t = {}",
                t.agent,
                t.step,
                t.min_label,
                traj.end_time()
            ),
        });
    }
    Ok(())
}

fn study(args: StudyArgs) -> Result<(), Failure> {
    let pinned = configure_threads(args.common.threads.as_deref())?;
    let sc = load(&args.scenario, args.common.seed)?;
    let opts = StudyOptions { mode: args.common.mode.map(Into::into), oracle: args.oracle, timing: !pinned };
    let report: StudyReport = match args.kind {
        StudyKindArg::Convergence => convergence_study(&sc, &args.ks, &opts)?,
        StudyKindArg::Residual => residual_study(&sc, &args.ks, &opts)?,
    };
    if let Some(out) = &args.common.out {
        export_report(&report, format_for(&args.common, out), out)?;
    }
    print(&json!({
        "scenario": report.scenario,
        "kind": report.kind,
        "mode": report.mode,
        "rows": report.rows.len(),
        "slope": report.slope,
        "slope_note": report.slope_note,
        "abort": report.abort,
    }));
    match report.abort_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn parse_rates(text: &str) -> Result<DMatrix<f64>, Failure> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| r.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()
        .map_err(|e| validation(format!("--rates: {e}")))?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(validation("--rates must be a square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn prox(command: ProxCommand) -> Result<(), Failure> {
    let ProxCommand::Eval { mode, lambda_hat, tau, payoff, rates, convention } = command;
    let hat = LabelDistribution::new(lambda_hat)?;
    let (result, residual) = match mode {
        ProxMode::Hellinger => {
            if payoff.len() != hat.n() {
                return Err(validation(format!("--payoff needs {} entries", hat.n())));
            }
            let conv = match convention {
                Convention::Geodesic => HsConvention::Geodesic,
                Convention::Literal => HsConvention::Literal,
            };
            let r = prox_hs_payoff(&payoff, &hat, tau, conv)?;
            let res = el_residual_hs_payoff(&payoff, &hat, &r.lambda_new, tau, &LabelMetricSpace::discrete(hat.n()))?;
            (r, res)
        }
        ProxMode::Markov => {
            let q = parse_rates(rates.as_deref().ok_or_else(|| validation("--rates is required for markov"))?)?;
            let geom = MarkovGeometry::new(q)?;
            let r = markov_label_step(&hat, &geom, tau)?;
            let res = el_residual_markov(&hat, &r.lambda_new, &geom, tau)?;
            (r, res)
        }
    };
    print(&json!({
        "lambda_new": result.lambda_new.weights(),
        "objective": result.objective_value,
        "iterations": result.iterations,
        "converged": result.converged,
        "residual": residual,
    }));
    if !result.converged {
        return Err(Failure { code: EXIT_NONCONVERGENCE, message: "proximal solver did not converge".into() });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Study(a) => study(a),
        Command::Prox { command } => prox(command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Scenario("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::InvalidInitialDatum { agent: 0, min: 0.0, delta: 0.1 }), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::GuardFailure { step: 0, tau: 1.0, limit: 0.5 }), EXIT_ABORT);
        assert_eq!(
            exit_code(&Error::ProxNonConvergence { step: 0, agent: 0, detail: String::new() }),
            EXIT_NONCONVERGENCE
        );
    }

    #[test]
    fn rates_parse_rows() {
        let q = parse_rates("-1, 2; 1, -2").ok().unwrap();
        assert_eq!(q[(1, 0)], 1.0);
        assert!(parse_rates("1,2;3").is_err());
    }
}
