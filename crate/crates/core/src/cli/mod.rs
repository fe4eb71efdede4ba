//! Command-line driver: workload presets, tuning runs, replay and reports.

mod presets;

pub use presets::{gemv_tiles, preset, va_tiles, Preset, PRESETS};

use crate::ir::{Counters, WorkloadSpec};
use crate::lower::LoweredModule;
use crate::machine::{interpret, time_breakdown, ExecutionMetrics, MachineConfig};
use crate::pimopt::OptLevel;
use crate::sched::{replay, trace_from_json, trace_to_json, Instruction, Schedule};
use crate::tune::{default_schedule, tune, Bench, SearchConfig, TuneError, TuningDatabase};
use crate::verify::verify;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "pimtune", version, about = "Autotuning tensor compiler for a simulated PIM machine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search for the fastest schedule and write the run artifacts.
    Autotune(AutotuneArgs),
    /// Replay a trace and print its report row.
    Eval(EvalArgs),
    /// Check a trace against the machine limits without running it.
    Verify(EvalArgs),
    /// Dynamic metrics of the misalignment presets at every level.
    Ablate(AblateArgs),
    /// Summarize a tuning database.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct WorkloadArgs {
    /// Workload kind (va, red, mtv, ttv, mmtv, geva, gemv) or preset name.
    #[arg(long)]
    pub workload: Option<String>,
    #[arg(long)]
    pub m: Option<i64>,
    #[arg(long)]
    pub n: Option<i64>,
    #[arg(long)]
    pub k: Option<i64>,
    #[arg(long)]
    pub dtype: Option<String>,
    /// Machine profile (TOML or JSON); the bundled UPMEM profile by default.
    #[arg(long)]
    pub machine: Option<PathBuf>,
    #[arg(long = "opt-level", default_value = "3")]
    pub opt_level: OptLevel,
    /// Full model shapes for the GPT-J presets.
    #[arg(long = "full-shape")]
    pub full_shape: bool,
}

#[derive(Args, Debug)]
pub struct AutotuneArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Database path; `<out>/db.jsonl` by default.
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Replay a saved `manifest.json` instead of reading the other flags.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Trace JSON; defaults to the preset's trace, then the library-style schedule.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Append the row to `<out>/report.csv` as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub machine: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub db: PathBuf,
}

/// Everything needed to repeat an autotuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub workload: WorkloadSpec,
    pub machine: Option<PathBuf>,
    pub search: SearchConfig,
    pub opt_level: OptLevel,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verify(String),
    Mismatch(String),
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Verify(m) | CliError::Mismatch(m) | CliError::Failure(m) => m,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::SemanticMismatch { .. } => CliError::Mismatch(e.to_string()),
            TuneError::Config(_) | TuneError::Workload(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let text = match cmd {
        Command::Autotune(a) => cmd_autotune(&manifest_of(&a)?, a.db.as_deref())?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Verify(a) => cmd_verify(&a)?,
        Command::Ablate(a) => {
            let csv = cmd_ablate_opts(&load_machine(a.machine.as_deref())?)?;
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let p = dir.join("ablate.csv");
                std::fs::write(&p, &csv).map_err(|e| io_err(&p, e))?;
            }
            csv
        }
        Command::Report(a) => cmd_report(&a.db)?,
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Failure(e.to_string()))
}

pub fn load_machine(path: Option<&Path>) -> Result<MachineConfig, CliError> {
    match path {
        None => Ok(MachineConfig::upmem_default()),
        Some(p) => MachineConfig::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
    }
}

/// The workload named by the flags and the preset's trace, if any.
pub fn resolve_workload(w: &WorkloadArgs) -> Result<(WorkloadSpec, Option<Vec<Instruction>>), CliError> {
    let name = w.workload.as_deref().ok_or_else(|| CliError::Usage("--workload is required".into()))?;
    let mut text = match preset(name) {
        Some(p) => (if w.full_shape { p.full } else { p.scaled }).to_string(),
        None => format!("workload={name}"),
    };
    for (key, v) in [("m", w.m), ("n", w.n), ("k", w.k)] {
        if let Some(v) = v {
            write!(text, " {key}={v}").unwrap();
        }
    }
    if let Some(d) = &w.dtype {
        write!(text, " dtype={d}").unwrap();
    }
    let spec = WorkloadSpec::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let trace = preset(name).and_then(|p| p.trace).map(|f| f(&spec));
    Ok((spec, trace))
}

fn manifest_of(a: &AutotuneArgs) -> Result<RunManifest, CliError> {
    if let Some(p) = &a.manifest {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        return serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())));
    }
    let (spec, _) = resolve_workload(&a.workload)?;
    let search = SearchConfig { max_trials: a.trials, seed: a.seed, opt_level: a.workload.opt_level, ..Default::default() };
    Ok(RunManifest {
        workload: spec,
        machine: a.workload.machine.clone(),
        search,
        opt_level: a.workload.opt_level,
        seed: a.seed,
        out: a.out.clone(),
    })
}

fn shape_text(spec: &WorkloadSpec) -> String {
    spec.shape().iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

pub const REPORT_HEADER: &str = "workload,shape,level,h2d_us,kernel_us,d2h_us,post_us,total_us,branches,dma,iters\n";

/// Per-tasklet maxima of the counters that the report rows carry.
fn critical_tasklet(m: &ExecutionMetrics) -> Counters {
    let mut c = Counters::default();
    for t in m.dpus.iter().flat_map(|d| d.tasklets.iter()) {
        c.branches = c.branches.max(t.branches);
        c.dma_loads = c.dma_loads.max(t.dma_count());
        c.innermost_iters = c.innermost_iters.max(t.innermost_iters);
    }
    c
}

/// Run a schedule under the oracle gate and format its report row.
pub fn report_row(spec: &WorkloadSpec, s: &Schedule, level: OptLevel, cfg: &MachineConfig) -> Result<String, CliError> {
    let bench = Bench::new(spec, cfg, level)?;
    let m = compile_verified(s, level, cfg)?;
    let r = interpret(&m, &bench.inputs, cfg).map_err(|e| CliError::Mismatch(e.to_string()))?;
    for (name, want) in &bench.reference {
        if !r.outputs[name].approx_eq(want, 1e-6) {
            return Err(CliError::Mismatch(format!("output `{name}` differs from the reference")));
        }
    }
    let t = time_breakdown(&r.metrics, cfg);
    let c = critical_tasklet(&r.metrics);
    Ok(format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
        spec.kind,
        shape_text(spec),
        level,
        t.setup_us + t.h2d_us,
        t.kernel_us,
        t.d2h_us,
        t.post_us,
        t.total(),
        c.branches,
        c.dma_loads,
        c.innermost_iters
    ))
}

fn compile_verified(s: &Schedule, level: OptLevel, cfg: &MachineConfig) -> Result<LoweredModule, CliError> {
    let m = crate::compile(s, level, cfg).map_err(|e| CliError::Verify(e.to_string()))?;
    let v = verify(&m, cfg);
    if !v.is_empty() {
        let list: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        return Err(CliError::Verify(format!("verification failed: {}", list.join(", "))));
    }
    Ok(m)
}

pub fn cmd_autotune(man: &RunManifest, db_path: Option<&Path>) -> Result<String, CliError> {
    let cfg = load_machine(man.machine.as_deref())?;
    let search = SearchConfig { seed: man.seed, opt_level: man.opt_level, ..man.search.clone() };
    let report = tune(&man.workload, &search, &cfg)?;
    let dir = &man.out;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    let db_file = db_path.map(Path::to_path_buf).unwrap_or_else(|| dir.join("db.jsonl"));
    report.db.save(&db_file).map_err(|e| io_err(&db_file, e))?;
    write("history.csv", &report.history_csv())?;
    write("manifest.json", &serde_json::to_string_pretty(man).expect("manifest serializes"))?;
    let prog = crate::ir::build_workload(&man.workload).map_err(|e| CliError::Usage(e.to_string()))?;
    let best = replay(&report.best.trace, &prog).map_err(|e| CliError::Failure(e.to_string()))?;
    write("best.trace.json", &trace_to_json(&report.best.trace))?;
    let module = compile_verified(&best, man.opt_level, &cfg)?;
    write("best.ir.txt", &module.pretty())?;
    let row = report_row(&man.workload, &best, man.opt_level, &cfg)?;
    write("report.csv", &format!("{REPORT_HEADER}{row}"))?;
    Ok(format!(
        "best {:.6} us ({}), {} records, artifacts in {}\n",
        report.best.cost.unwrap_or(f64::NAN),
        report.best.family,
        report.db.records.len(),
        dir.display()
    ))
}

fn schedule_for(a: &EvalArgs) -> Result<(WorkloadSpec, Schedule, MachineConfig), CliError> {
    let (spec, preset_trace) = resolve_workload(&a.workload)?;
    let cfg = load_machine(a.workload.machine.as_deref())?;
    let prog = crate::ir::build_workload(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let trace = match &a.trace {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Some(trace_from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
        }
        None => preset_trace,
    };
    let s = match trace {
        Some(t) => replay(&t, &prog).map_err(|e| CliError::Usage(format!("trace does not replay: {e}")))?,
        None => default_schedule(&prog, &cfg).ok_or_else(|| CliError::Usage("no default schedule for this workload".into()))?,
    };
    Ok((spec, s, cfg))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let (spec, s, cfg) = schedule_for(a)?;
    let row = report_row(&spec, &s, a.workload.opt_level, &cfg)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let p = dir.join("report.csv");
        let mut text = std::fs::read_to_string(&p).unwrap_or_else(|_| REPORT_HEADER.to_string());
        text.push_str(&row);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    Ok(format!("{REPORT_HEADER}{row}"))
}

pub fn cmd_verify(a: &EvalArgs) -> Result<String, CliError> {
    let (_, s, cfg) = schedule_for(a)?;
    compile_verified(&s, a.workload.opt_level, &cfg)?;
    Ok("ok\n".into())
}

pub const ABLATE_HEADER: &str = "preset,level,guards_dyn,dma_dyn,iters_dyn,instrs_dyn\n";

/// Dynamic totals over all DPUs and tasklets for each ablation preset and level.
pub fn cmd_ablate_opts(cfg: &MachineConfig) -> Result<String, CliError> {
    let mut out = String::from(ABLATE_HEADER);
    for p in PRESETS.iter().filter(|p| p.ablation) {
        let spec = WorkloadSpec::parse(p.scaled).map_err(|e| CliError::Usage(e.to_string()))?;
        let prog = crate::ir::build_workload(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
        let trace = (p.trace.expect("ablation presets carry a trace"))(&spec);
        let s = replay(&trace, &prog).map_err(|e| CliError::Failure(e.to_string()))?;
        let bench = Bench::new(&spec, cfg, OptLevel::O0)?;
        for level in OptLevel::ALL {
            let m = compile_verified(&s, level, cfg)?;
            let r = interpret(&m, &bench.inputs, cfg).map_err(|e| CliError::Mismatch(e.to_string()))?;
            let t = r.metrics.totals;
            writeln!(out, "{},{},{},{},{},{}", p.name, level, t.branches, t.dma_count(), t.innermost_iters, t.instrs).unwrap();
        }
    }
    Ok(out)
}

pub fn cmd_report(path: &Path) -> Result<String, CliError> {
    let db = TuningDatabase::load(path)?;
    let mut out = String::from("workload,records,verified,violations,best_cost,best_family\n");
    let mut names: Vec<&str> = db.records.iter().map(|r| r.workload.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for w in names {
        let recs: Vec<_> = db.records.iter().filter(|r| r.workload == w).collect();
        let verified = recs.iter().filter(|r| r.verified()).count();
        let violations = recs.iter().filter(|r| !r.violations.is_empty()).count();
        let best = db.best(w);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            w,
            recs.len(),
            verified,
            violations,
            best.and_then(|b| b.cost).map(|c| format!("{c:.6}")).unwrap_or_default(),
            best.map(|b| b.family.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    Ok(out)
}
