//! Command-line front end: load a game, solve it, simulate it, verify it,
//! and export artifacts as line-delimited records.
//!
//! Every artifact starts with a [`Header`] that records the full run
//! configuration. Failures print one line `error: <reason> [key=value ...]`
//! to stderr and exit nonzero.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::filters::{build_public_recursion, PublicRecursion};
use crate::linalg::serde_rows;
use crate::simulation::{monte_carlo, sample_path_at, McReport};
use crate::solver::{evaluate_profile, solve_equilibrium, ConvergenceReport, SolverOptions, ValueTable};
use crate::verification::consistency::{consistency_report_with, ConsistencyReport};
use crate::verification::deviation::{deviation_certificate, DeviationCertificate, GridOptions};
use crate::{game, GameSpec, StrategyProfile};

/// Exit status for invalid input or a failed computation.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when the equilibrium iteration did not converge.
pub const EXIT_NOT_CONVERGED: i32 = 2;
/// Exit status when a verification check failed.
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Simulate,
    Verify,
    Export,
}

#[derive(Debug, Parser)]
#[command(name = "lqg-pbe", version, about = "Solve, simulate and verify linear equilibria of LQG games with private signals")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Compute an equilibrium and write profile, filters, values and convergence report.
    Solve(CommonArgs),
    /// Monte Carlo estimate of expected total rewards.
    Simulate(CommonArgs),
    /// Consistency checks and the deviation certificate.
    Verify(CommonArgs),
    /// Re-emit a JSON artifact as line-delimited records.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Game spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output artifact path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 500)]
    max_iter: usize,
    /// Worker threads for Monte Carlo work (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Random directions per (player, stage) in the deviation grid.
    #[arg(long = "deviation-grid", default_value_t = 3)]
    deviation_grid: usize,
    /// Use the profile from a prior solve artifact (JSON or exported records) instead of solving.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Simulate only: also write every path as line-delimited records here.
    #[arg(long)]
    trajectories: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Artifact written by solve, simulate or verify.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Validated configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub spec_path: Option<PathBuf>,
    pub output_path: PathBuf,
    pub input_path: Option<PathBuf>,
    pub profile_path: Option<PathBuf>,
    pub trajectories_path: Option<PathBuf>,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub threads: usize,
    pub grid_directions: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_path.as_os_str().is_empty() {
            return Err(Error::InvalidArgument {
                arg: "out",
                reason: "output path is empty".into(),
            });
        }
        if self.command != Command::Export && self.spec_path.as_ref().is_none_or(|p| p.as_os_str().is_empty()) {
            return Err(Error::InvalidArgument {
                arg: "spec",
                reason: "spec path is empty".into(),
            });
        }
        if self.n_paths < 2 {
            return Err(Error::InvalidArgument {
                arg: "paths",
                reason: format!("need at least 2 paths, got {}", self.n_paths),
            });
        }
        if self.grid_directions == 0 {
            return Err(Error::InvalidArgument {
                arg: "deviation-grid",
                reason: "must be positive".into(),
            });
        }
        self.solver_options().validate()
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            damping: self.damping,
            tol: self.tol,
            max_outer_iters: self.max_iter,
            ..Default::default()
        }
    }

    pub fn grid(&self) -> GridOptions {
        GridOptions {
            directions: self.grid_directions,
            ..Default::default()
        }
    }
}

impl From<Cli> for RunConfig {
    fn from(cli: Cli) -> Self {
        let (command, a) = match cli.command {
            Sub::Export(e) => {
                return RunConfig {
                    command: Command::Export,
                    spec_path: None,
                    output_path: e.out,
                    input_path: Some(e.input),
                    profile_path: None,
                    trajectories_path: None,
                    damping: 0.5,
                    tol: 1e-9,
                    max_iter: 500,
                    n_paths: 2,
                    seed: 0,
                    threads: 0,
                    grid_directions: 3,
                }
            }
            Sub::Solve(a) => (Command::Solve, a),
            Sub::Simulate(a) => (Command::Simulate, a),
            Sub::Verify(a) => (Command::Verify, a),
        };
        RunConfig {
            command,
            spec_path: Some(a.spec),
            output_path: a.out,
            input_path: None,
            profile_path: a.profile,
            trajectories_path: a.trajectories,
            damping: a.damping,
            tol: a.tol,
            max_iter: a.max_iter,
            n_paths: a.paths,
            seed: a.seed,
            threads: a.threads,
            grid_directions: a.deviation_grid,
        }
    }
}

/// Reproducibility header carried by every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
}

impl Header {
    fn new(config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
        }
    }
}

/// Public filter quantities of one player at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub stage: usize,
    pub player: usize,
    #[serde(with = "serde_rows")]
    pub sigma: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub cross_coeff: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub belief_cov: DMatrix<f64>,
}

fn filter_summary(rec: &PublicRecursion) -> Vec<FilterSummary> {
    let mut out = Vec::new();
    for (t, stage) in rec.stages.iter().enumerate() {
        for (i, fs) in stage.iter().enumerate() {
            out.push(FilterSummary {
                stage: t,
                player: i,
                sigma: fs.sigma.clone(),
                cross_coeff: fs.cross_coeff.clone(),
                belief_cov: fs.belief_cov.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveArtifact {
    pub header: Header,
    pub spec: GameSpec,
    pub profile: StrategyProfile,
    pub filters: Vec<FilterSummary>,
    pub values: ValueTable,
    /// Absent when the profile was loaded rather than solved.
    pub report: Option<ConvergenceReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateArtifact {
    pub header: Header,
    pub monte_carlo: McReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyArtifact {
    pub header: Header,
    pub report: Option<ConvergenceReport>,
    pub consistency: ConsistencyReport,
    pub certificate: DeviationCertificate,
    pub passed: bool,
}

/// Outcome of a run: exit status plus the one-line reason for failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Status {
    pub code: i32,
    pub reason: Option<String>,
}

impl Status {
    fn ok() -> Self {
        Self { code: 0, reason: None }
    }
}

/// Reads and validates a JSON game spec.
pub fn load_spec(path: &Path) -> Result<GameSpec> {
    let text = fs::read_to_string(path)?;
    let spec: GameSpec = serde_json::from_str(&text).map_err(|e| {
        Error::Parse(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
    })?;
    game::validate_game(spec)
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text)
        .map_err(|e| Error::Parse(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))
}

/// Loads a strategy profile from a solve artifact, either as written by
/// `solve` or as exported records.
pub fn load_profile(path: &Path) -> Result<StrategyProfile> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let is_records = serde_json::from_str::<Value>(first)
        .ok()
        .and_then(|v| v.get("record").cloned())
        .is_some();
    if !is_records {
        let art: SolveArtifact = parse_json(path, &text)?;
        return Ok(art.profile);
    }
    let mut cells: Vec<(usize, usize, crate::AffineStrategy)> = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}: line {} column {}: {e}", path.display(), k + 1, e.column())))?;
        if v.get("record").and_then(Value::as_str) != Some("strategy") {
            continue;
        }
        let rec: StrategyRecord = serde_json::from_value(v)
            .map_err(|e| Error::Parse(format!("{}: line {}: {e}", path.display(), k + 1)))?;
        cells.push((rec.stage, rec.player, rec.strategy));
    }
    let horizon = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let players = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let mut stages: Vec<Vec<Option<crate::AffineStrategy>>> = vec![vec![None; players]; horizon];
    for (t, i, s) in cells {
        stages[t][i] = Some(s);
    }
    let stages = stages
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            row.into_iter()
                .enumerate()
                .map(|(i, s)| s.ok_or_else(|| Error::Parse(format!("{}: no strategy for player {i} at stage {t}", path.display()))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StrategyProfile { stages })
}

#[derive(Debug, Serialize, Deserialize)]
struct StrategyRecord {
    stage: usize,
    player: usize,
    #[serde(flatten)]
    strategy: crate::AffineStrategy,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Profile to work with: loaded, or solved (with its report).
fn obtain_profile(spec: &GameSpec, config: &RunConfig) -> Result<(StrategyProfile, Option<ConvergenceReport>)> {
    match &config.profile_path {
        Some(p) => {
            let profile = load_profile(p)?;
            profile.check(spec)?;
            Ok((profile, None))
        }
        None => {
            let eq = solve_equilibrium(spec, &config.solver_options())?;
            Ok((eq.profile, Some(eq.report)))
        }
    }
}

fn not_converged(report: &ConvergenceReport) -> Status {
    Status {
        code: EXIT_NOT_CONVERGED,
        reason: Some(format!(
            "not_converged iterations={} residual={:e}",
            report.iterations, report.residual
        )),
    }
}

fn solve_cmd(config: &RunConfig, spec: GameSpec) -> Result<Status> {
    let (profile, report) = obtain_profile(&spec, config)?;
    let rec = build_public_recursion(&spec, &profile)?;
    let values = evaluate_profile(&spec, &rec, &profile)?;
    let status = match &report {
        Some(r) if !r.converged => not_converged(r),
        _ => Status::ok(),
    };
    let art = SolveArtifact {
        header: Header::new(config),
        filters: filter_summary(&rec),
        spec,
        profile,
        values,
        report,
    };
    write_json(&config.output_path, &art)?;
    Ok(status)
}

fn simulate_cmd(config: &RunConfig, spec: GameSpec) -> Result<Status> {
    let (profile, report) = obtain_profile(&spec, config)?;
    if let Some(r) = report.as_ref().filter(|r| !r.converged) {
        return Ok(not_converged(r));
    }
    let rec = build_public_recursion(&spec, &profile)?;
    let mc = monte_carlo(&spec, &profile, &rec, config.n_paths, config.seed)?;
    if let Some(path) = &config.trajectories_path {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header = json!({ "record": "header", "header": Header::new(config) });
        writeln!(w, "{header}")?;
        for p in 0..config.n_paths as u64 {
            let tr = sample_path_at(&spec, &profile, &rec, config.seed, p, None);
            let line = json!({ "record": "trajectory", "path": p, "trajectory": tr });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    write_json(
        &config.output_path,
        &SimulateArtifact {
            header: Header::new(config),
            monte_carlo: mc,
        },
    )?;
    Ok(Status::ok())
}

fn verify_cmd(config: &RunConfig, spec: GameSpec) -> Result<Status> {
    let (profile, report) = obtain_profile(&spec, config)?;
    let rec = build_public_recursion(&spec, &profile)?;
    let consistency = consistency_report_with(&spec, &profile, &rec, config.n_paths, config.seed)?;
    let certificate = deviation_certificate(&spec, &profile, &rec, &config.grid(), config.n_paths, config.seed)?;
    let passed = consistency.passed() && certificate.passed();
    let status = match &report {
        Some(r) if !r.converged => not_converged(r),
        _ if !passed => Status {
            code: EXIT_VERIFY_FAILED,
            reason: Some(format!(
                "verification_failed consistency_failures={} profitable_deviations={}",
                consistency.failures().count(),
                certificate.detected().count()
            )),
        },
        _ => Status::ok(),
    };
    write_json(
        &config.output_path,
        &VerifyArtifact {
            header: Header::new(config),
            report,
            consistency,
            certificate,
            passed,
        },
    )?;
    Ok(status)
}

/// Splits a JSON artifact into line-delimited records: the header first,
/// then one record per strategy, filter stage, value, check or deviation.
pub fn export_records(artifact: &Value) -> Result<Vec<Value>> {
    let obj = artifact
        .as_object()
        .ok_or_else(|| Error::Parse("artifact is not a JSON object".into()))?;
    let header = obj.get("header").ok_or_else(|| Error::Parse("artifact has no header".into()))?;
    let mut out = vec![json!({ "record": "header", "header": header })];
    let tagged = |kind: &str, mut v: Value| {
        if let Some(m) = v.as_object_mut() {
            m.insert("record".into(), Value::String(kind.into()));
        }
        v
    };
    for (key, value) in obj.iter().filter(|(k, _)| *k != "header") {
        match key.as_str() {
            "profile" => {
                let stages = value["stages"].as_array().cloned().unwrap_or_default();
                for (t, row) in stages.iter().enumerate() {
                    for (i, s) in row.as_array().cloned().unwrap_or_default().into_iter().enumerate() {
                        let mut rec = tagged("strategy", s);
                        rec["stage"] = json!(t);
                        rec["player"] = json!(i);
                        out.push(rec);
                    }
                }
            }
            "values" => {
                for (t, row) in value.as_array().cloned().unwrap_or_default().iter().enumerate() {
                    for (i, v) in row.as_array().cloned().unwrap_or_default().into_iter().enumerate() {
                        out.push(json!({ "record": "value", "stage": t, "player": i, "value": v }));
                    }
                }
            }
            "filters" => {
                for f in value.as_array().cloned().unwrap_or_default() {
                    out.push(tagged("filter", f));
                }
            }
            "consistency" => {
                let mut summary = value.clone();
                if let Some(m) = summary.as_object_mut() {
                    for e in m.remove("entries").and_then(|e| e.as_array().cloned()).unwrap_or_default() {
                        out.push(tagged("check", e));
                    }
                }
                out.push(tagged("consistency", summary));
            }
            "certificate" => {
                let mut summary = value.clone();
                if let Some(m) = summary.as_object_mut() {
                    for e in m.remove("entries").and_then(|e| e.as_array().cloned()).unwrap_or_default() {
                        out.push(tagged("deviation", e));
                    }
                }
                out.push(tagged("certificate", summary));
            }
            _ => out.push(json!({ "record": key, "value": value })),
        }
    }
    Ok(out)
}

fn export_cmd(config: &RunConfig) -> Result<Status> {
    let input = config.input_path.as_ref().ok_or(Error::InvalidArgument {
        arg: "input",
        reason: "missing".into(),
    })?;
    let text = fs::read_to_string(input)?;
    let artifact: Value = parse_json(input, &text)?;
    let mut w = BufWriter::new(fs::File::create(&config.output_path)?);
    for rec in export_records(&artifact)? {
        writeln!(w, "{rec}")?;
    }
    w.flush()?;
    Ok(Status::ok())
}

/// Executes one validated run.
pub fn run(config: &RunConfig) -> Result<Status> {
    config.validate()?;
    let go = || match config.command {
        Command::Export => export_cmd(config),
        cmd => {
            let path = config.spec_path.as_ref().expect("validated");
            let spec = load_spec(path)?;
            match cmd {
                Command::Solve => solve_cmd(config, spec),
                Command::Simulate => simulate_cmd(config, spec),
                Command::Verify => verify_cmd(config, spec),
                Command::Export => unreachable!(),
            }
        }
    };
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidArgument {
                arg: "threads",
                reason: e.to_string(),
            })?;
        pool.install(go)
    } else {
        go()
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Parse(_) => "parse_error",
        Error::Io(_) => "io_error",
        Error::IllPosedStage { .. } => "ill_posed_stage",
        Error::StageSingular { .. } => "stage_singular",
        Error::InvalidArgument { .. } => "invalid_argument",
        Error::DimensionMismatch { .. } | Error::NotSymmetric { .. } | Error::Definiteness { .. } => "invalid_spec",
        _ => "failure",
    }
}

/// Parses `args`, runs, reports, and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    let config = RunConfig::from(cli);
    match run(&config) {
        Ok(Status { code: 0, .. }) => 0,
        Ok(Status { code, reason }) => {
            eprintln!("error: {}", reason.unwrap_or_default());
            code
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {} {msg}", error_kind(&e));
            EXIT_ERROR
        }
    }
}
