//! `tlsekit` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, unreadable or malformed
//! files, size cap), 2 infeasible instance, 3 numerical failure or power
//! iteration that did not converge.

pub mod io;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conditioning::{self, float_or_str, ConditionOptions, ConditionReport, Method, ReportMode, DEFAULT_EXPLICIT_CAP};
use crate::generate::{trial_rng, GeneratorSpec, CONTROLLED_T};
use crate::matfree::PowerOptions;
use crate::perturb::{self, EtaRow, ForwardErrorReport, WtlsStudy};
use crate::tlse::{self, Dims, SolveOptions, TlseProblem, DEFAULT_CONSTRAINT_RANK_TOL, DEFAULT_GAP_TOL, DEFAULT_RANK_TOL};
use crate::TlseError;
use io::{IoError, MatrixFormat};

#[derive(Debug, Parser)]
#[command(name = "tlsekit", version, about = "Constrained multidimensional total least squares: solutions, condition numbers, perturbation studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for X_t and print residuals and the σ̃ spectrum
    Solve(SolveCmd),
    /// Condition numbers κ_abs, κ_rel, m, c and their bounds
    Cond(CondCmd),
    /// Perturbation experiments
    #[command(subcommand)]
    Study(Study),
    /// Write a generated instance to matrix files
    Gen(GenCmd),
}

#[derive(Debug, Subcommand)]
pub enum Study {
    /// η = ‖vec(ΔX_t) − K vec(Δ)‖_∞ over ε (rows) and t (columns)
    Perturbation(PerturbationCmd),
    /// Convergence of the weighted unconstrained solution as ε → 0
    Wtls(WtlsCmd),
    /// Forward errors of a componentwise perturbation against condition bounds
    ForwardError(ForwardErrorCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Uniform,
    Piecewise,
    Controlled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Auto,
    Explicit,
    MatrixFree,
}

/// Files or a generator, never both. With neither, `--gen uniform` is used.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Block A (CSV; MatrixMarket for .mtx/.mm)
    #[arg(long = "A", value_name = "FILE")]
    pub a: Option<PathBuf>,
    /// Block B
    #[arg(long = "B", value_name = "FILE")]
    pub b: Option<PathBuf>,
    /// Constraint block C (omit C and D for plain TLS)
    #[arg(long = "C", value_name = "FILE")]
    pub c: Option<PathBuf>,
    /// Constraint right-hand side D
    #[arg(long = "D", value_name = "FILE")]
    pub d: Option<PathBuf>,
    /// Generator family
    #[arg(long = "gen", value_enum, conflicts_with_all = ["a", "b", "c", "d"])]
    pub gen: Option<Family>,
    /// p,q,n,d for the uniform generator
    #[arg(long, value_parser = parse_dims, default_value = "10,40,40,5")]
    pub dims: Dims,
    /// Piecewise: sites left of the breakpoint
    #[arg(long = "M", default_value_t = 200)]
    pub m_left: usize,
    /// Piecewise: sites right of the breakpoint
    #[arg(long = "N", default_value_t = 200)]
    pub n_right: usize,
    /// Piecewise: breakpoint in (0, 1)
    #[arg(long = "a", default_value_t = 0.5)]
    pub breakpoint: f64,
    /// Piecewise: uniform observation noise amplitude
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Piecewise: number of right-hand sides d
    #[arg(long, default_value_t = 1)]
    pub rhs: usize,
    /// Controlled: condition number of [C D]
    #[arg(long = "kappaC", value_parser = positive, default_value_t = 1e3)]
    pub kappa_c: f64,
    /// Controlled: singular-value gap parameter
    #[arg(long, value_parser = positive, default_value_t = 0.01)]
    pub delta: f64,
    /// RNG seed; one is drawn and printed when absent
    #[arg(long, env = "TLSEKIT_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TolArgs {
    /// Relative singular-value gap required between σ̃_k and σ̃_{k+1}
    #[arg(long, value_parser = positive, default_value_t = DEFAULT_GAP_TOL)]
    pub gap_tol: f64,
    /// Relative rank threshold for V̄₂₂
    #[arg(long, value_parser = positive, default_value_t = DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    /// Relative cutoff for the pseudoinverse of V̄₂₂
    #[arg(long, value_parser = positive)]
    pub pinv_tol: Option<f64>,
    /// Relative rank threshold for C
    #[arg(long, value_parser = positive, default_value_t = DEFAULT_CONSTRAINT_RANK_TOL)]
    pub constraint_tol: f64,
}

#[derive(Debug, Clone, Args)]
pub struct CondArgs {
    /// Relative change that ends a power-iteration run
    #[arg(long, value_parser = positive, default_value_t = 1e-8)]
    pub power_tol: f64,
    #[arg(long, default_value_t = 5000)]
    pub power_max_iter: usize,
    /// Largest (n+d)(p+q) for explicit Kronecker assembly
    #[arg(long, default_value_t = DEFAULT_EXPLICIT_CAP)]
    pub cap: usize,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct SolveCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub tol: TolArgs,
    /// Requested t = p + k (default: largest admissible)
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CondCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub tol: TolArgs,
    #[command(flatten)]
    pub cond: CondArgs,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct PerturbationCmd {
    #[command(flatten)]
    pub input: InputArgs,
    /// Values of t (default: the selected t)
    #[arg(long, value_delimiter = ',')]
    pub t: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "1e-2,1e-4,1e-6")]
    pub eps: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct WtlsCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',')]
    pub t: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "1e-2,3e-3,1e-3,3e-4,1e-4")]
    pub eps: Vec<f64>,
    #[arg(long, value_parser = positive, default_value_t = DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ForwardErrorCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub cond: CondArgs,
    #[arg(long)]
    pub t: Option<usize>,
    /// Perturbation size: ΔL = ε E ⊙ L, ΔH = ε E ⊙ H
    #[arg(long, value_parser = positive, default_value_t = 1e-12)]
    pub eps: f64,
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GenCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = MatrixFormat::Csv)]
    pub matrix_format: MatrixFormat,
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} must be positive and finite"))
    }
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| "dims must read p,q,n,d".to_string())?;
    match parts[..] {
        [p, q, n, d] => Ok(Dims { p, q, n, d }),
        _ => Err("dims must read p,q,n,d".into()),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tlse(#[from] TlseError),
    #[error("power iteration did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
    #[error("cannot encode JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Tlse(e) if e.is_infeasible() => 2,
            CliError::Tlse(TlseError::Numerical(_)) | CliError::NotConverged(_) => 3,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn main() -> ExitCode {
    run_from(std::env::args_os())
}

/// Parses `args` (program name first), runs, and maps the outcome to an exit code.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let (mut out, mut err) = (stdout.lock(), stderr.lock());
    match run(cli, &mut out, &mut err) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            let _ = writeln!(err, "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Solve(cmd) => cmd_solve(cmd, out, err),
        Command::Cond(cmd) => cmd_cond(cmd, out, err),
        Command::Study(Study::Perturbation(cmd)) => cmd_perturbation(cmd, out, err),
        Command::Study(Study::Wtls(cmd)) => cmd_wtls(cmd, out, err),
        Command::Study(Study::ForwardError(cmd)) => cmd_forward_error(cmd, out, err),
        Command::Gen(cmd) => cmd_gen(cmd, out, err),
    }
}

/// A loaded instance; `seed` is set when a generator drew it.
struct Instance {
    problem: TlseProblem,
    spec: Option<GeneratorSpec>,
    seed: Option<u64>,
}

impl Instance {
    /// The controlled family is built around `t = 8`.
    fn default_t(&self) -> Option<usize> {
        matches!(self.spec, Some(GeneratorSpec::Controlled { .. })).then_some(CONTROLLED_T)
    }

    fn label(&self) -> String {
        match self.spec {
            Some(GeneratorSpec::Controlled { kappa_c, delta }) => format!("κ_C={} δ={}", sig2(kappa_c), delta),
            Some(GeneratorSpec::PiecewisePoly { a, .. }) => format!("a={a}"),
            _ => String::new(),
        }
    }
}

fn resolve_seed(seed: Option<u64>, err: &mut dyn Write) -> CliResult<u64> {
    match seed {
        Some(s) => Ok(s),
        None => {
            let s: u64 = rand::random();
            writeln!(err, "seed: {s} (injected; pass --seed {s} to replay)")?;
            Ok(s)
        }
    }
}

fn generator_spec(input: &InputArgs, family: Family) -> GeneratorSpec {
    match family {
        Family::Uniform => {
            let Dims { p, q, n, d } = input.dims;
            GeneratorSpec::Uniform { p, q, n, d }
        }
        Family::Piecewise => GeneratorSpec::PiecewisePoly {
            m: input.m_left,
            n: input.n_right,
            a: input.breakpoint,
            d: input.rhs,
            noise: input.noise,
        },
        Family::Controlled => GeneratorSpec::Controlled { kappa_c: input.kappa_c, delta: input.delta },
    }
}

fn load(input: &InputArgs, err: &mut dyn Write) -> CliResult<Instance> {
    let any_file = input.a.is_some() || input.b.is_some() || input.c.is_some() || input.d.is_some();
    if !any_file {
        let spec = generator_spec(input, input.gen.unwrap_or(Family::Uniform));
        let seed = resolve_seed(input.seed, err)?;
        let problem = spec.generate(seed)?;
        return Ok(Instance { problem, spec: Some(spec), seed: Some(seed) });
    }
    let (Some(a), Some(b)) = (&input.a, &input.b) else {
        return Err(CliError::Usage("--A and --B are both required with file input".into()));
    };
    let (a, b) = (io::read_matrix(a)?, io::read_matrix(b)?);
    let problem = match (&input.c, &input.d) {
        (Some(c), Some(d)) => TlseProblem::new(a, b, io::read_matrix(c)?, io::read_matrix(d)?)?,
        (None, None) => TlseProblem::unconstrained(a, b)?,
        _ => return Err(CliError::Usage("--C and --D must be given together".into())),
    };
    Ok(Instance { problem, spec: None, seed: input.seed })
}

fn solve_options(tol: &TolArgs, t: Option<usize>) -> SolveOptions {
    SolveOptions {
        requested_t: t,
        gap_tol: tol.gap_tol,
        rank_tol: tol.rank_tol,
        constraint_tol: tol.constraint_tol,
        pinv_tol: tol.pinv_tol,
    }
}

fn condition_options(args: &CondArgs, seed: u64) -> ConditionOptions {
    ConditionOptions {
        mode: match args.mode {
            Mode::Auto => ReportMode::Auto,
            Mode::Explicit => ReportMode::Explicit,
            Mode::MatrixFree => ReportMode::MatrixFree,
        },
        cap: args.cap,
        power: PowerOptions { tol: args.power_tol, max_iter: args.power_max_iter, seed },
    }
}

/// Two significant digits, `inf`/`nan` spelled out.
pub fn sig2(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.1e}")
    }
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn seed_suffix(seed: Option<u64>) -> String {
    seed.map(|s| format!("  (seed {s})")).unwrap_or_default()
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `‖C X_t − D‖_F`
    pub constraint: f64,
    /// `‖Â X_t − B̂‖_F`
    pub consistency: f64,
    /// Frobenius norm of the optimal correction to `[A B]`
    pub correction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutput {
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub k: usize,
    pub t: usize,
    /// Singular values of `Ã Q̃₂`.
    pub sigma: Vec<f64>,
    /// `X_t`, row by row.
    pub x_t: Vec<Vec<f64>>,
    pub residuals: Residuals,
}

fn cmd_solve(cmd: SolveCmd, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let inst = load(&cmd.input, err)?;
    let t = cmd.t.or(inst.default_t());
    let (decomp, sol) = tlse::solve_full(&inst.problem, &solve_options(&cmd.tol, t))?;
    let report = SolveOutput {
        dims: inst.problem.dims(),
        seed: inst.seed,
        k: sol.k,
        t: sol.t,
        sigma: decomp.sigma_tilde.iter().copied().collect(),
        x_t: rows_of(&sol.x),
        residuals: Residuals {
            constraint: sol.constraint_residual,
            consistency: sol.consistency_residual,
            correction: sol.correction_norm,
        },
    };
    match cmd.format {
        Format::Json => emit_json(out, &report)?,
        Format::Csv => write!(out, "{}", io::format_csv(&sol.x))?,
        Format::Table => {
            let d = report.dims;
            let mut s = String::new();
            writeln!(s, "instance    p={} q={} n={} d={}{}", d.p, d.q, d.n, d.d, seed_suffix(report.seed)).ok();
            writeln!(s, "k, t        {}, {}", report.k, report.t).ok();
            let sig: Vec<String> = report.sigma.iter().map(|v| sig2(*v)).collect();
            writeln!(s, "σ̃           {}", sig.join(" ")).ok();
            writeln!(
                s,
                "residuals   ‖CX−D‖_F {}   ‖ÂX−B̂‖_F {}   correction {}",
                sig2(report.residuals.constraint),
                sig2(report.residuals.consistency),
                sig2(report.residuals.correction)
            )
            .ok();
            writeln!(s, "X_t ({}×{})", sol.x.nrows(), sol.x.ncols()).ok();
            for row in &report.x_t {
                let cells: Vec<String> = row.iter().map(|v| format!("{:>9}", sig2(*v))).collect();
                writeln!(s, "  {}", cells.join(" ")).ok();
            }
            out.write_all(s.as_bytes())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- cond

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondOutput {
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `|explicit − matrix-free| / explicit` when both paths ran.
    #[serde(with = "float_or_str::option")]
    pub kappa_abs_relative_gap: Option<f64>,
    pub report: ConditionReport,
}

fn skipped_reason(report: &ConditionReport, key: &str) -> &'static str {
    if report.notes.iter().any(|n| n.starts_with(key) && n.contains("size cap")) {
        "skipped (size cap)"
    } else {
        "not computed"
    }
}

fn cmd_cond(cmd: CondCmd, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let inst = load(&cmd.input, err)?;
    let t = cmd.t.or(inst.default_t());
    let (decomp, sol) = tlse::solve_full(&inst.problem, &solve_options(&cmd.tol, t))?;
    let opts = condition_options(&cmd.cond, inst.seed.unwrap_or(0));
    let report = conditioning::condition_report(&inst.problem, &decomp, &sol, &opts)?;
    let gap = report
        .kappa_abs_matrix_free
        .map(|mf| (report.kappa_abs.value - mf.value).abs() / report.kappa_abs.value);
    let output = CondOutput { dims: inst.problem.dims(), seed: inst.seed, kappa_abs_relative_gap: gap, report };
    match cmd.format {
        Format::Json => emit_json(out, &output)?,
        Format::Csv => out.write_all(cond_csv(&output).as_bytes())?,
        Format::Table => out.write_all(cond_table(&output).as_bytes())?,
    }
    if !output.report.power_converged {
        return Err(CliError::NotConverged(output.report.power_iterations));
    }
    Ok(())
}

fn cond_rows(o: &CondOutput) -> Vec<(&'static str, String, String)> {
    let r = &o.report;
    let mut rows = Vec::new();
    let tag = |m: Method| m.to_string();
    match (r.kappa_abs.method, r.kappa_abs_matrix_free) {
        (Method::MatrixFree, _) => {
            rows.push(("kappa_abs", skipped_reason(r, "explicit κ_abs").into(), tag(Method::ExplicitKron)));
            rows.push(("kappa_abs", sig2(r.kappa_abs.value), tag(Method::MatrixFree)));
        }
        (m, mf) => {
            rows.push(("kappa_abs", sig2(r.kappa_abs.value), tag(m)));
            if let Some(mf) = mf {
                rows.push(("kappa_abs", sig2(mf.value), tag(mf.method)));
            }
        }
    }
    if let Some(g) = o.kappa_abs_relative_gap {
        rows.push(("kappa_abs_relative_gap", sig2(g), String::new()));
    }
    rows.push(("kappa_rel", r.kappa_rel.map_or("undefined".into(), sig2), tag(r.kappa_abs.method)));
    rows.push(("kappa_abs_upper", sig2(r.kappa_abs_upper), "bound".into()));
    if let Some(l) = r.kappa_abs_lower {
        rows.push(("kappa_abs_lower", sig2(l), "bound".into()));
    }
    for (name, v) in [("m", r.m), ("c", r.c)] {
        match v {
            Some(v) => rows.push((name, sig2(v.value), tag(v.method))),
            None => rows.push((name, skipped_reason(r, "m and c").into(), String::new())),
        }
    }
    rows.push(("m_upper", sig2(r.m_upper), "bound".into()));
    rows.push(("c_upper", sig2(r.c_upper), "bound".into()));
    rows.push(("rho_ac_1", sig2(r.rho_ac_1), String::new()));
    rows.push(("rho_ac_2", sig2(r.rho_ac_2), String::new()));
    rows.push(("eta_k_sigma", sig2(r.eta_k_sigma), String::new()));
    if let Some(dev) = r.closed_form_deviation {
        rows.push(("closed_form_k_deviation", sig2(dev), tag(Method::ClosedFormD1)));
    }
    rows
}

fn cond_table(o: &CondOutput) -> String {
    let r = &o.report;
    let d = o.dims;
    let mut s = String::new();
    writeln!(s, "instance p={} q={} n={} d={}  k={} t={}{}", d.p, d.q, d.n, d.d, r.k, r.t, seed_suffix(o.seed)).ok();
    for (name, value, method) in cond_rows(o) {
        let label = match name {
            "kappa_abs" => "κ_abs",
            "kappa_abs_relative_gap" => "κ_abs relative gap",
            "kappa_rel" => "κ_rel",
            "kappa_abs_upper" => "κ_abs upper bound",
            "kappa_abs_lower" => "κ_abs lower bound",
            "m_upper" => "m^u",
            "c_upper" => "c^u",
            "rho_ac_1" => "ρ_AC(1)",
            "rho_ac_2" => "ρ_AC(2)",
            "eta_k_sigma" => "η_k^σ",
            "closed_form_k_deviation" => "closed-form K check (d=1)",
            other => other,
        };
        let method = if method.is_empty() { String::new() } else { format!("[{method}]") };
        writeln!(s, "{label:<26} {value:<20} {method}").ok();
    }
    writeln!(
        s,
        "power iteration            {} iterations, {}",
        r.power_iterations,
        if r.power_converged { "converged" } else { "NOT converged" }
    )
    .ok();
    for n in &r.notes {
        writeln!(s, "note: {n}").ok();
    }
    s
}

fn cond_csv(o: &CondOutput) -> String {
    let mut s = String::from("quantity,value,method\n");
    for (name, value, method) in cond_rows(o) {
        // full precision in CSV
        let value = match (name, value.as_str()) {
            (_, v) if v.starts_with("skipped") || v == "not computed" || v == "undefined" => v.to_string(),
            _ => full_value(o, name, &method).unwrap_or(value),
        };
        writeln!(s, "{name},{value},{method}").ok();
    }
    s
}

fn full_value(o: &CondOutput, name: &str, method: &str) -> Option<String> {
    let r = &o.report;
    let v = match name {
        "kappa_abs" => {
            if r.kappa_abs.method.to_string() == method {
                r.kappa_abs.value
            } else {
                r.kappa_abs_matrix_free?.value
            }
        }
        "kappa_abs_relative_gap" => o.kappa_abs_relative_gap?,
        "kappa_rel" => r.kappa_rel?,
        "kappa_abs_upper" => r.kappa_abs_upper,
        "kappa_abs_lower" => r.kappa_abs_lower?,
        "m" => r.m?.value,
        "c" => r.c?.value,
        "m_upper" => r.m_upper,
        "c_upper" => r.c_upper,
        "rho_ac_1" => r.rho_ac_1,
        "rho_ac_2" => r.rho_ac_2,
        "eta_k_sigma" => r.eta_k_sigma,
        "closed_form_k_deviation" => r.closed_form_deviation?,
        _ => return None,
    };
    Some(format!("{v:?}"))
}

// ---------------------------------------------------------------- study perturbation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaColumn {
    pub t: usize,
    /// Set when no solution exists at this `t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    pub rows: Vec<EtaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutput {
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub eps: Vec<f64>,
    pub columns: Vec<EtaColumn>,
}

/// `ts`, or the default selection when empty.
fn t_values(inst: &Instance, ts: &[usize]) -> CliResult<Vec<usize>> {
    if !ts.is_empty() {
        return Ok(ts.to_vec());
    }
    if let Some(t) = inst.default_t() {
        return Ok(vec![t]);
    }
    Ok(vec![tlse::solve(&inst.problem, &SolveOptions::default())?.t])
}

fn cmd_perturbation(cmd: PerturbationCmd, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let inst = load(&cmd.input, err)?;
    let seed = match inst.seed {
        Some(s) => s,
        None => resolve_seed(None, err)?,
    };
    let mut columns = Vec::new();
    for t in t_values(&inst, &cmd.t)? {
        match perturb::perturbation_error_study(&inst.problem, t, &cmd.eps, seed) {
            Ok(rows) => columns.push(EtaColumn { t, flag: None, rows }),
            Err(e) if e.is_infeasible() => columns.push(EtaColumn { t, flag: Some(e.to_string()), rows: Vec::new() }),
            Err(e) => return Err(e.into()),
        }
    }
    let output = PerturbationOutput { dims: inst.problem.dims(), seed: Some(seed), eps: cmd.eps, columns };
    match cmd.format {
        Format::Json => emit_json(out, &output)?,
        Format::Csv => {
            let mut s = String::from("eps,t,eta,flag\n");
            for col in &output.columns {
                for (i, &eps) in output.eps.iter().enumerate() {
                    let row = col.rows.get(i);
                    let eta = row.and_then(|r| r.eta).map(|v| format!("{v:?}")).unwrap_or_default();
                    let flag = col.flag.as_deref().or(row.and_then(|r| r.flag.as_deref())).unwrap_or("");
                    writeln!(s, "{eps:?},{},{eta},{}", col.t, csv_field(flag)).ok();
                }
            }
            out.write_all(s.as_bytes())?;
        }
        Format::Table => {
            let mut s = String::new();
            let mut notes = Vec::new();
            writeln!(s, "η = ‖vec(ΔX_t) − K vec(Δ)‖_∞{}", seed_suffix(output.seed)).ok();
            write!(s, "{:<8}", "ε \\ t").ok();
            for col in &output.columns {
                write!(s, " {:>9}", col.t).ok();
            }
            s.push('\n');
            for (i, &eps) in output.eps.iter().enumerate() {
                write!(s, "{:<8}", sig2(eps)).ok();
                for col in &output.columns {
                    let cell = match (col.rows.get(i), &col.flag) {
                        (Some(EtaRow { eta: Some(v), .. }), _) => sig2(*v),
                        (Some(EtaRow { flag: Some(f), .. }), _) | (None, Some(f)) => {
                            notes.push(format!("t={} ε={}: {f}", col.t, sig2(eps)));
                            "flagged".into()
                        }
                        _ => "-".into(),
                    };
                    write!(s, " {cell:>9}").ok();
                }
                s.push('\n');
            }
            for n in notes {
                writeln!(s, "flagged {n}").ok();
            }
            out.write_all(s.as_bytes())?;
        }
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------- study wtls

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtlsEntry {
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    pub study: Option<WtlsStudy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtlsOutput {
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub eps: Vec<f64>,
    pub entries: Vec<WtlsEntry>,
}

fn cmd_wtls(cmd: WtlsCmd, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let inst = load(&cmd.input, err)?;
    let mut entries = Vec::new();
    for t in t_values(&inst, &cmd.t)? {
        match perturb::wtls_convergence_study(&inst.problem, t, &cmd.eps, cmd.rank_tol) {
            Ok(study) => entries.push(WtlsEntry { t, flag: None, study: Some(study) }),
            Err(e) if e.is_infeasible() => entries.push(WtlsEntry { t, flag: Some(e.to_string()), study: None }),
            Err(e) => return Err(e.into()),
        }
    }
    let output = WtlsOutput { dims: inst.problem.dims(), seed: inst.seed, eps: cmd.eps, entries };
    match cmd.format {
        Format::Json => emit_json(out, &output)?,
        Format::Csv => {
            let mut s = String::from("t,eps,error,flag\n");
            for e in &output.entries {
                for (i, &eps) in output.eps.iter().enumerate() {
                    let row = e.study.as_ref().and_then(|st| st.rows.get(i));
                    let err_v = row.and_then(|r| r.error).map(|v| format!("{v:?}")).unwrap_or_default();
                    let flag = e.flag.as_deref().or(row.and_then(|r| r.flag.as_deref())).unwrap_or("");
                    writeln!(s, "{},{eps:?},{err_v},{}", e.t, csv_field(flag)).ok();
                }
                let slope = e.study.as_ref().and_then(|st| st.slope).map(|v| format!("{v:?}")).unwrap_or_default();
                writeln!(s, "{},slope,{slope},", e.t).ok();
            }
            out.write_all(s.as_bytes())?;
        }
        Format::Table => {
            let mut s = String::new();
            writeln!(s, "‖X_t(ε) − X_t‖_F{}", seed_suffix(output.seed)).ok();
            write!(s, "{:<8}", "ε \\ t").ok();
            for e in &output.entries {
                write!(s, " {:>9}", e.t).ok();
            }
            s.push('\n');
            for (i, &eps) in output.eps.iter().enumerate() {
                write!(s, "{:<8}", sig2(eps)).ok();
                for e in &output.entries {
                    let cell = e
                        .study
                        .as_ref()
                        .and_then(|st| st.rows.get(i))
                        .map(|r| r.error.map_or("flagged".into(), sig2))
                        .unwrap_or_else(|| "flagged".into());
                    write!(s, " {cell:>9}").ok();
                }
                s.push('\n');
            }
            write!(s, "{:<8}", "slope").ok();
            for e in &output.entries {
                let cell = e.study.as_ref().and_then(|st| st.slope).map_or("-".into(), |v| format!("{v:.2}"));
                write!(s, " {cell:>9}").ok();
            }
            s.push('\n');
            for e in &output.entries {
                if let Some(f) = &e.flag {
                    writeln!(s, "flagged t={}: {f}", e.t).ok();
                }
                for r in e.study.iter().flat_map(|st| &st.rows) {
                    if let Some(f) = &r.flag {
                        writeln!(s, "flagged t={} ε={}: {f}", e.t, sig2(r.eps)).ok();
                    }
                }
            }
            out.write_all(s.as_bytes())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- study forward-error

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardErrorTrial {
    pub trial: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    pub report: Option<ForwardErrorReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardErrorOutput {
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub label: String,
    pub eps: f64,
    pub trials: Vec<ForwardErrorTrial>,
}

const FORWARD_HEADER: [&str; 12] = [
    "", "‖X_t‖²₂", "ρ", "‖Δx‖₂/‖x‖₂", "ε_n·κ_n", "ε_n·κ_n^u", "‖Δx‖∞/‖x‖∞", "ε_c·m", "ε_c·m^u", "‖Δx/x‖∞", "ε_c·c", "ε_c·c^u",
];

fn forward_cells(r: &ForwardErrorReport) -> [f64; 11] {
    [
        r.x_norm2_sq,
        r.rho,
        r.actual_rel_2norm,
        r.bound_n,
        r.bound_n_upper,
        r.actual_rel_maxnorm,
        r.bound_m,
        r.bound_m_upper,
        r.actual_componentwise,
        r.bound_c,
        r.bound_c_upper,
    ]
}

fn cmd_forward_error(cmd: ForwardErrorCmd, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let inst = load(&cmd.input, err)?;
    let seed = match inst.seed {
        Some(s) => s,
        None => resolve_seed(None, err)?,
    };
    let dims = inst.problem.dims();
    let entries = dims.cols() * dims.rows();
    if entries > cmd.cond.cap {
        return Err(TlseError::SizeCap { entries, cap: cmd.cond.cap }.into());
    }
    if cmd.cond.mode == Mode::MatrixFree {
        return Err(CliError::Usage("forward-error needs explicit m and c; drop --mode matrix-free".into()));
    }
    let t = cmd.t.or(inst.default_t());
    let opts = condition_options(&cmd.cond, seed);
    let mut trials = Vec::new();
    for trial in 0..cmd.trials {
        // trial streams start past the one used for generation
        let mut rng = trial_rng(seed, trial + 1);
        let res = perturb::componentwise_perturbation_with(&inst.problem, cmd.eps, &mut rng)
            .and_then(|delta| perturb::forward_error_report(&inst.problem, t, &delta, &opts));
        match res {
            Ok(report) => trials.push(ForwardErrorTrial { trial, flag: None, report: Some(report) }),
            Err(e) if e.is_infeasible() => trials.push(ForwardErrorTrial { trial, flag: Some(e.to_string()), report: None }),
            Err(e) => return Err(e.into()),
        }
    }
    let output = ForwardErrorOutput { dims, seed: Some(seed), label: inst.label(), eps: cmd.eps, trials };
    match cmd.format {
        Format::Json => emit_json(out, &output)?,
        Format::Csv => {
            let mut s = String::from(
                "trial,x_norm2_sq,rho,actual_rel_2norm,bound_n,bound_n_upper,actual_rel_maxnorm,bound_m,bound_m_upper,actual_componentwise,bound_c,bound_c_upper,flag\n",
            );
            for tr in &output.trials {
                let cells: Vec<String> = match &tr.report {
                    Some(r) => forward_cells(r).iter().map(|v| format!("{v:?}")).collect(),
                    None => vec![String::new(); 11],
                };
                writeln!(s, "{},{},{}", tr.trial, cells.join(","), csv_field(tr.flag.as_deref().unwrap_or(""))).ok();
            }
            out.write_all(s.as_bytes())?;
        }
        Format::Table => {
            let mut s = String::new();
            writeln!(s, "ε = {}{}", sig2(output.eps), seed_suffix(output.seed)).ok();
            let label_w = output.label.chars().count().max(8);
            let head: Vec<String> = FORWARD_HEADER[1..].iter().map(|h| pad_left(h, 11)).collect();
            writeln!(s, "{} {}", pad_right(FORWARD_HEADER[0], label_w), head.join(" ")).ok();
            for tr in &output.trials {
                let label = if output.label.is_empty() { format!("trial {}", tr.trial) } else { output.label.clone() };
                match &tr.report {
                    Some(r) => {
                        let cells: Vec<String> = forward_cells(r).iter().map(|v| pad_left(&sig2(*v), 11)).collect();
                        writeln!(s, "{} {}", pad_right(&label, label_w), cells.join(" ")).ok();
                    }
                    None => {
                        writeln!(s, "{} flagged: {}", pad_right(&label, label_w), tr.flag.as_deref().unwrap_or("")).ok();
                    }
                }
            }
            out.write_all(s.as_bytes())?;
        }
    }
    Ok(())
}

fn pad_left(s: &str, w: usize) -> String {
    format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())))
}

fn pad_right(s: &str, w: usize) -> String {
    format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())))
}

// ---------------------------------------------------------------- gen

fn cmd_gen(cmd: GenCmd, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if cmd.input.a.is_some() || cmd.input.b.is_some() || cmd.input.c.is_some() || cmd.input.d.is_some() {
        return Err(CliError::Usage("gen writes generated instances; pass --gen instead of files".into()));
    }
    let inst = load(&cmd.input, err)?;
    std::fs::create_dir_all(&cmd.out_dir)
        .map_err(|source| IoError::Read { path: cmd.out_dir.display().to_string(), source })?;
    let pb = &inst.problem;
    for (name, m) in [("A", &pb.a), ("B", &pb.b), ("C", &pb.c), ("D", &pb.d)] {
        let path = cmd.out_dir.join(format!("{name}.{}", cmd.matrix_format.extension()));
        io::write_matrix(&path, m, cmd.matrix_format)?;
        writeln!(out, "{}", path.display())?;
    }
    if let Some(s) = inst.seed {
        writeln!(err, "generated with seed {s}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("tlsekit").chain(args.iter().copied())).unwrap()
    }

    fn run_capture(args: &[&str]) -> (CliResult<()>, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let res = run(parse(args), &mut out, &mut err);
        (res, String::from_utf8(out).unwrap())
    }

    #[test]
    fn sig2_formats_two_digits() {
        assert_eq!(sig2(2.149e-11), "2.1e-11");
        assert_eq!(sig2(12.0), "1.2e1");
        assert_eq!(sig2(f64::INFINITY), "inf");
    }

    #[test]
    fn files_and_generator_conflict() {
        let r = Cli::try_parse_from(["tlsekit", "solve", "--gen", "uniform", "--A", "a.csv"]);
        assert!(r.is_err());
    }

    #[test]
    fn tolerances_must_be_positive() {
        assert!(Cli::try_parse_from(["tlsekit", "solve", "--gap-tol", "0"]).is_err());
        assert!(Cli::try_parse_from(["tlsekit", "solve", "--pinv-tol", "-1"]).is_err());
        assert!(Cli::try_parse_from(["tlsekit", "solve", "--dims", "1,2,3"]).is_err());
    }

    #[test]
    fn solve_json_has_contract_fields() {
        let (res, out) = run_capture(&["solve", "--dims", "2,8,5,2", "--seed", "7", "--format", "json"]);
        res.unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        for key in ["x_t", "k", "t", "sigma", "residuals"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let parsed: SolveOutput = serde_json::from_str(&out).unwrap();
        assert_eq!(serde_json::to_string_pretty(&parsed).unwrap() + "\n", out);
    }

    #[test]
    fn cond_reports_both_paths_and_gap() {
        let (res, out) = run_capture(&["cond", "--dims", "2,8,5,2", "--seed", "3"]);
        res.unwrap();
        assert!(out.contains("[explicit-kron]") && out.contains("[matrix-free]"));
        assert!(out.contains("κ_abs relative gap"));
    }

    #[test]
    fn cond_above_cap_skips_explicit() {
        let (res, out) = run_capture(&["cond", "--dims", "2,8,5,2", "--seed", "3", "--cap", "10"]);
        res.unwrap();
        assert!(out.contains("skipped (size cap)"));
    }

    #[test]
    fn cond_explicit_mode_above_cap_is_usage_error() {
        let (res, _) = run_capture(&["cond", "--dims", "2,8,5,2", "--seed", "3", "--cap", "10", "--mode", "explicit"]);
        assert_eq!(res.unwrap_err().exit_code(), 1);
    }

    #[test]
    fn cond_single_rhs_has_closed_form_line() {
        let (res, out) = run_capture(&["cond", "--dims", "2,8,5,1", "--seed", "5"]);
        res.unwrap();
        assert!(out.contains("closed-form K check"), "{out}");
    }

    #[test]
    fn perturbation_table_shape() {
        let (res, out) =
            run_capture(&["study", "perturbation", "--dims", "2,10,5,2", "--t", "2,4,5", "--eps", "1e-2,1e-4", "--seed", "1"]);
        res.unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 4, "{out}");
        assert_eq!(lines[1].split_whitespace().count(), 3 + 3);
    }

    #[test]
    fn forward_error_controlled_row() {
        let (res, out) = run_capture(&["study", "forward-error", "--gen", "controlled", "--kappaC", "1e3", "--delta", "0.01", "--seed", "2"]);
        res.unwrap();
        assert!(out.contains("κ_C=1.0e3 δ=0.01"), "{out}");
    }
}
