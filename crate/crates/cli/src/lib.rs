//! Command-line front end for hosting capacity studies: scenario setup,
//! output files and exit codes. The binary in `main.rs` is a thin wrapper.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hostcap_core::branchflow::{feasibility_gap, power_flow_sweep, BranchFlowState, LimitReport};
use hostcap_core::conic::SolveStatus;
use hostcap_core::feeder::{bundled_feeder, parse_feeder, FeederModel, LoadScaling};
use hostcap_core::iteration::{self, HostingResult, IterationConfig, IterationError, NodeCapacity};
use hostcap_core::relax::{self, binding_constraints, Binding, Objective, RelaxError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_AUDIT: i32 = 5;

/// Voltage slack (pu magnitude) and export slack (pu power) of `validate`.
pub const VALIDATE_V_TOL: f64 = 1e-4;
pub const VALIDATE_P_TOL: f64 = 1e-6;

const BINDING_TOL: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "hostcap", version, about = "PV hosting capacity of radial distribution feeders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the relaxed SOCP and report how far it sits inside the cone
    Relax(RunArgs),
    /// Run the convex iteration to an exact hosting capacity
    Iterate(RunArgs),
    /// Re-check a result.json against the exact power flow
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Feeder file or bundled feeder name (ieee13, ieee123, two_bus, two_bus_zero_load); comma-separated for several
    #[arg(long, value_delimiter = ',', required = true)]
    pub feeder: Vec<String>,

    /// Load multipliers; comma-separated for several
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub load_mult: Vec<f64>,

    /// Gap contraction ratio per iteration, in (0, 1)
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,

    /// Damping of each update, in (0, 1]
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,

    /// Stop tolerance on the largest feasibility gap (pu²)
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,

    /// Stop tolerance on the change of total PV between iterations (pu)
    #[arg(long, default_value_t = 1e-4)]
    pub objective_tol: f64,

    /// Iteration cap
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,

    /// Output directory; one subdirectory per scenario when several are given
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Scenarios solved concurrently
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,

    /// Fill the wall-time column of trace.csv (makes output run-dependent)
    #[arg(long)]
    pub timing: bool,

    /// Also write the conic program in plain text (relax only)
    #[arg(long)]
    pub dump_program: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ValidateArgs {
    /// result.json written by `relax` or `iterate`
    pub result: PathBuf,

    /// Feeder to check against; defaults to the one named in the result's manifest
    #[arg(long)]
    pub feeder: Option<String>,

    /// Load multiplier; defaults to the one in the result's manifest
    #[arg(long)]
    pub load_mult: Option<f64>,
}

impl RunArgs {
    pub fn config(&self) -> IterationConfig {
        IterationConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            epsilon: self.epsilon,
            objective_tol: self.objective_tol,
            max_outer: self.max_iter,
            ..Default::default()
        }
    }
}

/// Everything that determines a run, echoed at the top of every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub feeder: String,
    pub load_mult: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub objective_tol: f64,
    pub max_outer: usize,
    pub out: String,
    /// Seconds since the epoch; taken from SOURCE_DATE_EPOCH when set.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, args: &RunArgs, feeder: &str, load_mult: f64, out: &Path) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            feeder: feeder.to_string(),
            load_mult,
            gamma: args.gamma,
            alpha: args.alpha,
            epsilon: args.epsilon,
            objective_tol: args.objective_tol,
            max_outer: args.max_iter,
            out: out.display().to_string(),
            timestamp: timestamp(),
        }
    }

    /// `# key=value` lines for the CSV outputs.
    pub fn header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} {}", self.tool, self.version);
        let _ = writeln!(s, "# command={}", self.command);
        let _ = writeln!(s, "# feeder={}", self.feeder);
        let _ = writeln!(s, "# load_mult={}", self.load_mult);
        let _ = writeln!(s, "# gamma={}", self.gamma);
        let _ = writeln!(s, "# alpha={}", self.alpha);
        let _ = writeln!(s, "# epsilon={}", self.epsilon);
        let _ = writeln!(s, "# objective_tol={}", self.objective_tol);
        let _ = writeln!(s, "# max_outer={}", self.max_outer);
        let _ = writeln!(s, "# out={}", self.out);
        let _ = writeln!(s, "# timestamp={}", self.timestamp);
        s
    }
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn new(code: i32, error: anyhow::Error) -> Self {
        CliError { code, error }
    }

    fn input(error: impl Into<anyhow::Error>) -> Self {
        CliError::new(EXIT_INPUT, error.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Reads a feeder file, or a bundled feeder when no such file exists.
pub fn load_feeder(feeder: &str, load_mult: f64) -> Result<FeederModel, CliError> {
    let path = Path::new(feeder);
    let text = if path.is_file() {
        fs::read_to_string(path)
            .with_context(|| format!("reading {feeder}"))
            .map_err(CliError::input)?
    } else {
        bundled_feeder(feeder)
            .ok_or_else(|| CliError::input(anyhow!("no feeder file or bundled feeder named `{feeder}`")))?
            .to_string()
    };
    let model = parse_feeder(&text)
        .with_context(|| format!("parsing {feeder}"))
        .map_err(CliError::input)?;
    model
        .scale_loads(LoadScaling::new(load_mult))
        .context("scaling loads")
        .map_err(CliError::input)
}

/// One (feeder, multiplier) pair with its output directory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub feeder: String,
    pub load_mult: f64,
    pub out: PathBuf,
}

pub fn scenarios(args: &RunArgs) -> Vec<Scenario> {
    let single = args.feeder.len() * args.load_mult.len() == 1;
    let mut out = Vec::new();
    for f in &args.feeder {
        for &m in &args.load_mult {
            let dir = if single {
                args.out.clone()
            } else {
                let stem = Path::new(f).file_stem().map_or(f.clone(), |s| s.to_string_lossy().into_owned());
                args.out.join(format!("{stem}_x{m}"))
            };
            out.push(Scenario {
                feeder: f.clone(),
                load_mult: m,
                out: dir,
            });
        }
    }
    out
}

/// What a finished scenario reports on stdout.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub report: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Document<T> {
    manifest: RunManifest,
    result: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxReport {
    pub status: SolveStatus,
    pub total_pv_pu: f64,
    pub total_pv_kw: f64,
    pub per_node: Vec<NodeCapacity>,
    pub min_gap: f64,
    pub max_abs_gap: f64,
    pub worst_edge: Option<String>,
    pub gaps: Vec<f64>,
    pub binding: Vec<Binding>,
    pub state: BranchFlowState,
}

fn per_node(model: &FeederModel, s: &BranchFlowState) -> Vec<NodeCapacity> {
    (0..model.node_count())
        .filter(|&i| model.has_pv(i))
        .map(|i| NodeCapacity {
            node: model.node_id(i).to_string(),
            pv_pu: s.p_pv[i],
            pv_kw: model.to_kw(s.p_pv[i]),
        })
        .collect()
}

fn write(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| CliError::new(EXIT_INPUT, e))
}

fn to_json<T: Serialize>(manifest: &RunManifest, result: T) -> String {
    let mut s = serde_json::to_string_pretty(&Document {
        manifest: manifest.clone(),
        result,
    })
    .expect("results serialize");
    s.push('\n');
    s
}

fn prepare(scenario: &Scenario) -> Result<FeederModel, CliError> {
    let model = load_feeder(&scenario.feeder, scenario.load_mult)?;
    fs::create_dir_all(&scenario.out)
        .with_context(|| format!("creating {}", scenario.out.display()))
        .map_err(CliError::input)?;
    Ok(model)
}

pub fn cmd_relax(args: &RunArgs, scenario: &Scenario) -> Result<Outcome, CliError> {
    let model = prepare(scenario)?;
    let manifest = RunManifest::new("relax", args, &scenario.feeder, scenario.load_mult, &scenario.out);
    if args.dump_program {
        let (prog, _) = relax::build_relaxed_hosting(&model);
        write(&scenario.out.join("program.txt"), &format!("{}{}", manifest.header(), prog.dump()))?;
    }
    let solved = relax::solve_relaxed(&model, Objective::Hosting, &Default::default()).map_err(|e| match e {
        RelaxError::NotOptimal(_) | RelaxError::Conic(_) => CliError::new(EXIT_SOLVER, e.into()),
        other => CliError::input(other),
    })?;
    let gap = feasibility_gap(&model, &solved.state);
    let (max_abs_gap, worst) = gap.max_abs();
    let report = RelaxReport {
        status: solved.solution.status,
        total_pv_pu: solved.total_pv,
        total_pv_kw: model.to_kw(solved.total_pv),
        per_node: per_node(&model, &solved.state),
        min_gap: if gap.e.is_empty() { 0.0 } else { gap.min() },
        max_abs_gap,
        worst_edge: worst.map(|e| model.edge_label(e)),
        gaps: gap.e.clone(),
        binding: binding_constraints(&model, &solved.state, BINDING_TOL),
        state: solved.state,
    };

    let mut csv = manifest.header();
    csv.push_str("edge,gap\n");
    for (e, g) in gap.e.iter().enumerate() {
        let _ = writeln!(csv, "{},{:e}", model.edge_label(e), g);
    }
    write(&scenario.out.join("gaps.csv"), &csv)?;
    write(&scenario.out.join("result.json"), &to_json(&manifest, &report))?;

    let mut text = String::new();
    let _ = writeln!(text, "{} x{}: relaxed capacity {:.3} kW", scenario.feeder, scenario.load_mult, report.total_pv_kw);
    let _ = writeln!(
        text,
        "  min gap {:.4e}, max |gap| {:.4e}{}",
        report.min_gap,
        report.max_abs_gap,
        report.worst_edge.as_ref().map(|e| format!(" on {e}")).unwrap_or_default()
    );
    let _ = writeln!(text, "  binding: {}", binding_summary(&report.binding));
    Ok(Outcome {
        code: EXIT_OK,
        report: text,
    })
}

fn binding_summary(binding: &[Binding]) -> String {
    if binding.is_empty() {
        return "none".to_string();
    }
    binding
        .iter()
        .map(|b| format!("{} at {}", b.kind, b.at))
        .collect::<Vec<_>>()
        .join(", ")
}

fn trace_csv(model: &FeederModel, manifest: &RunManifest, result: &HostingResult, timing: bool) -> String {
    let mut csv = manifest.header();
    csv.push_str("iter,max_abs_gap,objective_kw,status,ms\n");
    for r in &result.trace.records {
        let ms = if timing { format!("{:.3}", r.elapsed_ms) } else { String::new() };
        let _ = writeln!(
            csv,
            "{},{:e},{:.6},{},{}",
            r.k,
            r.max_abs_gap,
            model.to_kw(r.objective),
            r.status,
            ms
        );
    }
    csv
}

fn gaps_csv(model: &FeederModel, manifest: &RunManifest, result: &HostingResult) -> String {
    let mut csv = manifest.header();
    csv.push_str("iter");
    for e in 0..model.edge_count() {
        let _ = write!(csv, ",{}", model.edge_label(e));
    }
    csv.push('\n');
    for r in &result.trace.records {
        csv.push_str(&r.k.to_string());
        for g in &r.gaps {
            let _ = write!(csv, ",{g:e}");
        }
        csv.push('\n');
    }
    csv
}

pub fn cmd_iterate(args: &RunArgs, scenario: &Scenario) -> Result<Outcome, CliError> {
    let cfg = args.config();
    cfg.validate().map_err(CliError::input)?;
    let model = prepare(scenario)?;
    let manifest = RunManifest::new("iterate", args, &scenario.feeder, scenario.load_mult, &scenario.out);
    let result = match iteration::run(&model, &cfg) {
        Ok(r) => r,
        Err(IterationError::Config(msg)) => return Err(CliError::input(anyhow!(msg))),
        Err(IterationError::Solver { k, status, trace }) => {
            let partial = HostingResult {
                trace,
                ..empty_result(&model)
            };
            write(&scenario.out.join("trace.csv"), &trace_csv(&model, &manifest, &partial, args.timing))?;
            write(&scenario.out.join("gaps.csv"), &gaps_csv(&model, &manifest, &partial))?;
            return Err(CliError::new(
                EXIT_SOLVER,
                anyhow!("delta program at iteration {k} ended with status {status}"),
            ));
        }
        Err(e) => return Err(CliError::new(EXIT_SOLVER, e.into())),
    };

    write(&scenario.out.join("trace.csv"), &trace_csv(&model, &manifest, &result, args.timing))?;
    write(&scenario.out.join("gaps.csv"), &gaps_csv(&model, &manifest, &result))?;
    write(&scenario.out.join("result.json"), &to_json(&manifest, &result))?;

    let mut text = String::new();
    let _ = writeln!(text, "{} x{}:", scenario.feeder, scenario.load_mult);
    for r in &result.trace.records {
        let _ = writeln!(
            text,
            "  iter {:>3}  max |gap| {:.4e}  total {:.3} kW",
            r.k,
            r.max_abs_gap,
            model.to_kw(r.objective)
        );
    }
    let code = if !result.converged {
        let _ = writeln!(text, "  not converged after {} iterations", result.trace.len());
        EXIT_NOT_CONVERGED
    } else {
        let _ = writeln!(text, "  hosting capacity {:.3} kW", result.total_pv_kw);
        let _ = writeln!(text, "  binding: {}", binding_summary(&result.binding));
        match &result.audit {
            Some(a) if a.passed => EXIT_OK,
            Some(a) => {
                let (what, by) = a.worst.clone().unwrap_or_default();
                let _ = writeln!(text, "  audit failed: {what} by {by:.3e}");
                EXIT_AUDIT
            }
            None => EXIT_AUDIT,
        }
    };
    Ok(Outcome { code, report: text })
}

fn empty_result(model: &FeederModel) -> HostingResult {
    HostingResult {
        total_pv_pu: 0.0,
        total_pv_kw: 0.0,
        per_node: Vec::new(),
        final_state: BranchFlowState::zeros(model),
        iterate: BranchFlowState::zeros(model),
        trace: Default::default(),
        binding: Vec::new(),
        converged: false,
        repair_pu: 0.0,
        audit: None,
    }
}

#[derive(Debug, Deserialize)]
struct ValidateInput {
    manifest: RunManifest,
    result: ValidateResult,
}

#[derive(Debug, Deserialize)]
struct ValidateResult {
    per_node: Vec<NodeCapacity>,
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(&args.result)
        .with_context(|| format!("reading {}", args.result.display()))
        .map_err(CliError::input)?;
    let input: ValidateInput = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.result.display()))
        .map_err(CliError::input)?;
    let feeder = args.feeder.clone().unwrap_or(input.manifest.feeder.clone());
    let mult = args.load_mult.unwrap_or(input.manifest.load_mult);
    let model = load_feeder(&feeder, mult)?;

    let mut p_pv: Vec<f64> = (0..model.node_count()).map(|i| model.pv_lower(i)).collect();
    for n in &input.result.per_node {
        let i = model
            .node_index(&n.node)
            .ok_or_else(|| CliError::input(anyhow!("result names unknown node `{}`", n.node)))?;
        p_pv[i] = n.pv_pu;
    }

    let mut out = String::new();
    let _ = writeln!(out, "{} x{}: exact power flow at the reported injections", feeder, mult);
    let state = match power_flow_sweep(&model, &p_pv) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(out, "  FAIL: {e}");
            return Ok(Outcome {
                code: EXIT_AUDIT,
                report: out,
            });
        }
    };
    let _ = writeln!(out, "  {:<10} {:>10} {:>12}", "node", "|V| pu", "pv kW");
    for i in 0..model.node_count() {
        let _ = writeln!(
            out,
            "  {:<10} {:>10.6} {:>12.3}",
            model.node_id(i),
            state.v[i].sqrt(),
            model.to_kw(p_pv[i])
        );
    }
    let rep = LimitReport::new(&model, &state);
    let _ = writeln!(
        out,
        "  |V| range [{:.6}, {:.6}] pu, substation import {:.6} pu, worst overload {:.3e} pu",
        rep.v_min_pu, rep.v_max_pu, rep.p_sub, rep.overload_pu
    );
    let violations = rep.violations(&model, VALIDATE_V_TOL, VALIDATE_P_TOL);
    let code = match violations.first() {
        None => {
            let _ = writeln!(out, "  PASS");
            EXIT_OK
        }
        Some((what, by)) => {
            let _ = writeln!(out, "  FAIL: {what} by {by:.3e}");
            EXIT_AUDIT
        }
    };
    Ok(Outcome { code, report: out })
}

/// Runs `f` over every scenario on up to `jobs` threads; results keep the
/// scenario order.
fn fan_out<F>(scenarios: &[Scenario], jobs: usize, f: F) -> Vec<Result<Outcome, CliError>>
where
    F: Fn(&Scenario) -> Result<Outcome, CliError> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Outcome, CliError>>>> = scenarios.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, scenarios.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&scenarios[i]));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

/// Executes a parsed command line, printing reports to stdout and errors to
/// stderr. Returns the process exit code; with several scenarios the largest
/// code wins.
pub fn execute(cli: Cli) -> i32 {
    let results = match &cli.command {
        Command::Relax(args) => fan_out(&scenarios(args), args.jobs, |s| cmd_relax(args, s)),
        Command::Iterate(args) => fan_out(&scenarios(args), args.jobs, |s| cmd_iterate(args, s)),
        Command::Validate(args) => vec![cmd_validate(args)],
    };
    let mut code = EXIT_OK;
    for r in results {
        match r {
            Ok(o) => {
                print!("{}", o.report);
                code = code.max(o.code);
            }
            Err(e) => {
                eprintln!("error: {e}");
                code = code.max(e.code);
            }
        }
    }
    code
}
