//! `ibmot` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 bad input or usage,
//! 3 marginals not in convex order, 4 numerical failure. Errors are reported
//! as JSON on stderr.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use ibmot::convexify::convexify_pair;
use ibmot::coupling::{validate_coupling, Coupling};
use ibmot::measures::{convex_order_check, EmpiricalMeasure, CONVEX_ORDER_TOL};
use ibmot::objective::{evaluate, upper_bound};
use ibmot::optimizer::{solve, SolverOverrides, DEFAULT_THETA_CAP};
use ibmot::quadrature::{
    NoiseRule, QuadratureSpec, DEFAULT_NOISE_CUTOFF, DEFAULT_PANEL_ORDER, DEFAULT_PANEL_WIDTH,
    DEFAULT_TIME_NODES,
};
use ibmot::simulate::{simulate_fam, write_paths_csv, SimConfig};
use ibmot::{Error, RapConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Solve reports keep at most this many history records.
const MAX_HISTORY: usize = 1000;

#[derive(Parser)]
#[command(
    name = "ibmot",
    version,
    about = "Information-based martingale optimal transport solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test whether two measures are in convex order.
    Check(CheckArgs),
    /// Repair a pair of measures into convex order at minimal W1 cost.
    Convexify(ConvexifyArgs),
    /// Run projected gradient ascent to an approximately optimal coupling.
    Solve(SolveArgs),
    /// Evaluate the objective, its variance form and the upper bound.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo simulation of the filtered martingale under a coupling.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct MeasureArgs {
    /// Source measure (JSON `{atoms, weights}` or CSV with `value[,weight]`).
    #[arg(long)]
    mu: PathBuf,
    /// Target measure.
    #[arg(long)]
    nu: PathBuf,
    /// Reduce each measure to N quantile midpoints.
    #[arg(long)]
    discretize: Option<usize>,
}

#[derive(Args)]
struct RapArgs {
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long, default_value_t = 1.0)]
    t1: f64,
}

#[derive(Args)]
struct QuadArgs {
    /// Use a Gauss–Hermite noise rule with this many nodes instead of panels.
    #[arg(long)]
    hermite: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TIME_NODES)]
    time_nodes: usize,
    #[arg(long, default_value_t = DEFAULT_PANEL_ORDER)]
    panel_order: usize,
    #[arg(long, default_value_t = DEFAULT_PANEL_WIDTH)]
    panel_width: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_CUTOFF)]
    noise_cutoff: f64,
}

#[derive(Args)]
struct ReportArg {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    measures: MeasureArgs,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct ConvexifyArgs {
    #[command(flatten)]
    measures: MeasureArgs,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Repaired source measure (JSON).
    #[arg(long)]
    out_mu: Option<PathBuf>,
    /// Repaired target measure (JSON).
    #[arg(long)]
    out_nu: Option<PathBuf>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    measures: MeasureArgs,
    #[command(flatten)]
    rap: RapArgs,
    #[command(flatten)]
    quad: QuadArgs,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on the number of iterations.
    #[arg(long, default_value_t = DEFAULT_THETA_CAP)]
    max_iters: usize,
    /// Override the derived step size (voids the epsilon guarantee).
    #[arg(long)]
    lambda: Option<f64>,
    /// Fail instead of repairing marginals that are not in convex order.
    #[arg(long)]
    no_repair: bool,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Averaged coupling (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Coupling CSV (`i,j,x,y,p`).
    #[arg(long)]
    coupling: PathBuf,
    /// Source marginal to validate against (defaults to the implied one).
    #[arg(long, requires = "nu")]
    mu: Option<PathBuf>,
    #[arg(long, requires = "mu")]
    nu: Option<PathBuf>,
    #[command(flatten)]
    rap: RapArgs,
    #[command(flatten)]
    quad: QuadArgs,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    coupling: PathBuf,
    #[command(flatten)]
    rap: RapArgs,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 200)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Path CSV in long format (`path_id,t,I,M,W`); keeps every path in memory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    /// Convex-order check failed; the report was still written.
    NotOrdered,
    /// An input file could not be read.
    Input(PathBuf, std::io::Error),
    Io(PathBuf, std::io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Lib(Error::NotConvexOrder { .. }) | CliError::NotOrdered => 3,
            CliError::Lib(Error::ProjectionStalled { .. } | Error::Numerical(_)) => 4,
            CliError::Lib(Error::Io(_)) | CliError::Io(..) => 1,
            CliError::Lib(_) | CliError::Input(..) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Lib(Error::NotConvexOrder { .. }) | CliError::NotOrdered => {
                "not_convex_order"
            }
            CliError::Lib(Error::ProjectionStalled { .. }) => "projection_stalled",
            CliError::Lib(Error::Numerical(_)) => "numerical",
            CliError::Lib(Error::Io(_)) | CliError::Io(..) => "io",
            CliError::Lib(_) | CliError::Input(..) => "invalid_input",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Lib(e) => e.to_string(),
            CliError::NotOrdered => "measures are not in convex order".into(),
            CliError::Input(p, e) | CliError::Io(p, e) => format!("{}: {e}", p.display()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Input(path.to_owned(), e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(path.to_owned(), e))
}

fn read_measure(path: &Path, discretize: Option<usize>) -> CliResult<EmpiricalMeasure> {
    let m = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Input(path.to_owned(), e))?;
        EmpiricalMeasure::from_json_str(&text)?
    } else {
        EmpiricalMeasure::from_csv_reader(open(path)?)?
    };
    Ok(match discretize {
        Some(n) => m.discretize(n)?,
        None => m,
    })
}

fn read_measures(args: &MeasureArgs) -> CliResult<(EmpiricalMeasure, EmpiricalMeasure)> {
    Ok((
        read_measure(&args.mu, args.discretize)?,
        read_measure(&args.nu, args.discretize)?,
    ))
}

fn read_coupling(path: &Path) -> CliResult<Coupling> {
    Ok(Coupling::read_csv(open(path)?)?)
}

fn rap_config(args: &RapArgs) -> CliResult<RapConfig> {
    Ok(RapConfig::brownian(args.t0, args.t1)?)
}

fn quadrature(args: &QuadArgs, rap: &RapConfig) -> CliResult<QuadratureSpec> {
    let noise = match args.hermite {
        Some(n) => NoiseRule::Hermite { n },
        None => NoiseRule::Panels {
            order: args.panel_order,
            width: args.panel_width,
            cutoff: args.noise_cutoff,
        },
    };
    Ok(QuadratureSpec::new(rap, noise, args.time_nodes)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Io(path.to_owned(), e))
}

fn emit_report(arg: &ReportArg, command: &str, mut body: Value) -> CliResult<()> {
    let obj = body.as_object_mut().expect("report body is an object");
    obj.insert("version".into(), json!(VERSION));
    obj.insert("command".into(), json!(command));
    match &arg.report {
        Some(path) => write_json(path, &body),
        None => {
            let text = serde_json::to_string_pretty(&body).map_err(Error::from)?;
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}").and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(CliError::Io("<stdout>".into(), e))
                }
                _ => Ok(()),
            }
        }
    }
}

fn matrix_rows(c: &Coupling) -> Vec<Vec<f64>> {
    c.p.row_iter()
        .map(|r| r.iter().cloned().collect())
        .collect()
}

fn run_check(args: &CheckArgs) -> CliResult<()> {
    let (mu, nu) = read_measures(&args.measures)?;
    let rep = convex_order_check(&mu, &nu, CONVEX_ORDER_TOL);
    let ordered = rep.ordered;
    emit_report(
        &args.report,
        "check",
        json!({ "ordered": ordered, "report": rep }),
    )?;
    if ordered {
        Ok(())
    } else {
        Err(CliError::NotOrdered)
    }
}

fn run_convexify(args: &ConvexifyArgs) -> CliResult<()> {
    let (mu, nu) = read_measures(&args.measures)?;
    let res = convexify_pair(&mu, &nu, args.alpha, args.beta)?;
    if let Some(p) = &args.out_mu {
        write_json(p, &res.mu_tilde)?;
    }
    if let Some(p) = &args.out_nu {
        write_json(p, &res.nu_tilde)?;
    }
    emit_report(
        &args.report,
        "convexify",
        json!({
            "cost": res.cost,
            "alpha": res.alpha,
            "beta": res.beta,
            "mu_tilde": res.mu_tilde,
            "nu_tilde": res.nu_tilde,
        }),
    )
}

fn run_solve(args: &SolveArgs) -> CliResult<()> {
    let (mu, nu) = read_measures(&args.measures)?;
    let ordered = convex_order_check(&mu, &nu, CONVEX_ORDER_TOL).ordered;
    let (mu, nu, repair) = if ordered {
        (mu, nu, Value::Null)
    } else if args.no_repair {
        return Err(not_ordered(&mu, &nu));
    } else {
        let r = convexify_pair(&mu, &nu, args.alpha, args.beta)?;
        let info = json!({ "cost": r.cost, "alpha": r.alpha, "beta": r.beta });
        (r.mu_tilde, r.nu_tilde, info)
    };
    let rap = rap_config(&args.rap)?;
    let quad = quadrature(&args.quad, &rap)?;
    let overrides = SolverOverrides {
        max_theta_cap: Some(args.max_iters),
        lambda: args.lambda,
        ..Default::default()
    };
    let res = solve(&mu, &nu, &rap, &quad, args.epsilon, &overrides, args.seed)?;
    if let Some(p) = &args.out {
        let mut w = create(p)?;
        res.coupling_avg.write_csv(&mut w)?;
    }
    let stride = res.history.len().div_ceil(MAX_HISTORY).max(1);
    let history: Vec<_> = res.history.iter().step_by(stride).collect();
    emit_report(
        &args.report,
        "solve",
        json!({
            "value": res.value,
            "best_iterate_value": res.best_iterate_value,
            "bound": upper_bound(&mu, &nu, &rap),
            "coupling": matrix_rows(&res.coupling_avg),
            "row_support": res.coupling_avg.row_support,
            "col_support": res.coupling_avg.col_support,
            "residuals": res.residuals,
            "params": res.params_used,
            "quadrature": { "noise": quad.noise, "time_nodes": quad.n_time },
            "repair": repair,
            "warnings": res.warnings,
            "history_stride": stride,
            "history": history,
        }),
    )
}

fn not_ordered(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> CliError {
    let rep = convex_order_check(mu, nu, CONVEX_ORDER_TOL);
    CliError::Lib(Error::NotConvexOrder {
        min_q: rep.min_q,
        q_at_1: rep.q_at_1,
    })
}

fn run_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let c = read_coupling(&args.coupling)?;
    let rap = rap_config(&args.rap)?;
    let quad = quadrature(&args.quad, &rap)?;
    let ev = evaluate(&c, &rap, &quad)?;
    let (mu, nu) = match (&args.mu, &args.nu) {
        (Some(m), Some(n)) => (read_measure(m, None)?, read_measure(n, None)?),
        (None, None) => (
            EmpiricalMeasure::new(
                c.row_support.clone(),
                c.p.column_sum().iter().cloned().collect(),
            )?,
            EmpiricalMeasure::new(
                c.col_support.clone(),
                c.p.row_sum().iter().cloned().collect(),
            )?,
        ),
        _ => return Err(Error::Domain("--mu and --nu must be given together".into()).into()),
    };
    // Implied marginals drop empty atoms, in which case the shapes differ.
    let residuals = match validate_coupling(&c.p, &mu, &nu) {
        Ok(r) => json!(r),
        Err(Error::Shape { .. }) if args.mu.is_none() => Value::Null,
        Err(e) => return Err(e.into()),
    };
    emit_report(
        &args.report,
        "evaluate",
        json!({
            "K_I": ev.value,
            "variance_form": ev.variance_form,
            "bound": upper_bound(&mu, &nu, &rap),
            "residuals": residuals,
            "quadrature": { "noise": quad.noise, "time_nodes": quad.n_time },
            "nodes": ev.nodes,
        }),
    )
}

fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let c = read_coupling(&args.coupling)?;
    let rap = rap_config(&args.rap)?;
    let cfg = SimConfig {
        n_paths: args.paths,
        n_grid: args.grid,
        seed: args.seed,
        keep_paths: args.out.is_some(),
    };
    let sim = simulate_fam(&c, &rap, &cfg)?;
    if let Some(p) = &args.out {
        let mut w = create(p)?;
        write_paths_csv(&sim.bundle, rap.t1, &mut w)?;
    }
    emit_report(
        &args.report,
        "simulate",
        json!({
            "estimate": sim.estimate,
            "innovations": sim.innovations,
            "diagnostics": sim.diagnostics,
        }),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Check(a) => run_check(a),
        Command::Convexify(a) => run_convexify(a),
        Command::Solve(a) => run_solve(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = json!({
                "version": VERSION,
                "error": { "kind": e.kind(), "message": e.message(), "exit_code": e.code() },
            });
            eprintln!("{err}");
            ExitCode::from(e.code())
        }
    }
}
