use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use earlystop::config::{resolve_adversary, Inputs, RunConfig, RunConfigError};
use earlystop::eig::Value;
use earlystop::oracle::{explore, explore_small, OracleConfig, OracleError, OracleReport};
use earlystop::report::{check_properties, PropertyReport};
use earlystop::sim::{run_execution, SimError};
use earlystop::trace::ExecutionTrace;

/// Run, check and exhaustively explore early-stopping Byzantine agreement.
#[derive(Debug, Parser)]
#[command(name = "earlystop", version)]
struct Args {
    /// TOML run configuration. Without one, runs n=7, t=2 on random binary inputs.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed of the first run; run i uses seed + i.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Number of runs in the batch.
    #[arg(long, value_name = "K")]
    runs: Option<u32>,
    /// Write each run's trace as JSON lines. Batches get `.<run>` before the extension.
    #[arg(long, value_name = "PATH")]
    emit_trace: Option<PathBuf>,
    /// Evaluate every property; exit 1 if any fails.
    #[arg(long)]
    check: bool,
    /// Enumerate every single-corrupt behaviour instead of sampling runs.
    #[arg(long)]
    exhaustive: bool,
    /// Adversary strategy name or script path, overriding the config.
    #[arg(long, value_name = "NAME")]
    adversary: Option<String>,
}

const DEFAULT_CONFIG: &str = "n = 7\nt = 2\ninputs = \"random\"\n";

const EXIT_VIOLATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VIOLATION),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VIOLATION)
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<RunConfigError> for Failure {
    fn from(e: RunConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load_config(args: &Args) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(DEFAULT_CONFIG, None)?,
    };
    if let Some(name) = &args.adversary {
        let base = args.config.as_deref().and_then(Path::parent);
        cfg.adversary = resolve_adversary(name, cfg.alphabet_size, base).map_err(|e| Failure::Config(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

/// Returns whether every checked property held.
fn run(args: &Args) -> Result<bool, Failure> {
    let cfg = load_config(args)?;
    if args.exhaustive {
        return run_exhaustive(args, &cfg);
    }

    let results = run_batch(&cfg);
    let mut out = String::new();
    let mut all_pass = true;
    let mut max_halt = 0;
    let mut failed_runs = 0;
    for (i, result) in results.into_iter().enumerate() {
        let trace = match result {
            Ok(trace) => trace,
            Err(SimError::Config(e)) => return Err(Failure::Config(e.to_string())),
            Err(SimError::Adversary(e)) => return Err(Failure::Config(e.to_string())),
            Err(e @ SimError::Protocol { .. }) => return Err(Failure::Runtime(format!("run {i}: {e}"))),
            Err(SimError::NonTermination(trace)) => *trace,
        };
        if let Some(path) = &args.emit_trace {
            let path = trace_path(path, i, cfg.runs);
            write_trace(&path, &trace).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        }
        let report = check_properties(&trace, &cfg.budget);
        max_halt = max_halt.max(report.counters.max_halt_round);
        let pass = !args.check || (report.passed() && trace.summary.terminated);
        if !pass {
            failed_runs += 1;
        }
        all_pass &= pass;
        describe_run(&mut out, i, &trace, &report, args.check);
    }
    let _ = writeln!(
        out,
        "summary runs={} failed={} max_halt_round={} checked={} result={}",
        cfg.runs,
        failed_runs,
        max_halt,
        args.check,
        if all_pass { "PASS" } else { "FAIL" }
    );
    print!("{out}");
    Ok(all_pass)
}

/// Runs the batch on worker threads; results come back in run order.
fn run_batch(cfg: &RunConfig) -> Vec<Result<ExecutionTrace, SimError>> {
    let runs: Vec<u32> = (0..cfg.runs).collect();
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(runs.len());
    let chunk = runs.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&i| run_execution(&cfg.sim_config(i))).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("run worker panicked")).collect()
    })
}

fn describe_run(out: &mut String, index: usize, trace: &ExecutionTrace, report: &PropertyReport, check: bool) {
    let decisions: Vec<String> = trace
        .summary
        .outcomes
        .iter()
        .map(|o| format!("{}:{}", o.process, o.decision.map_or("-".to_string(), |v| v.to_string())))
        .collect();
    let c = &report.counters;
    let _ = writeln!(
        out,
        "run {index} seed={} adversary={} n={} t={} f={} rounds={} max_halt_round={} halt_bound={} max_bits={} max_it_nodes={} ct_size={}",
        report.seed,
        report.adversary,
        report.n,
        report.t,
        c.f_actual,
        c.rounds,
        c.max_halt_round,
        (c.f_actual + 2).min(report.t + 1),
        c.max_bits,
        c.max_it_nodes,
        c.ct_size
    );
    let _ = writeln!(out, "  decisions {}", decisions.join(" "));
    if !check {
        return;
    }
    for v in &report.verdicts {
        let state = match (v.pass, v.enforced) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "over",
        };
        let _ = write!(out, "  {:<20} {state}", v.name);
        if let Some(violation) = &v.violation {
            let _ = write!(out, "  {}", violation.message);
            if let Some(rec) = &violation.record {
                let _ = write!(out, "  at {}", serde_json::to_string(rec).unwrap_or_default());
            }
        }
        out.push('\n');
    }
}

fn trace_path(base: &Path, index: usize, runs: u32) -> PathBuf {
    if runs <= 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned());
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{index}"),
    };
    base.with_file_name(name)
}

fn write_trace(path: &Path, trace: &ExecutionTrace) -> std::io::Result<()> {
    let w = BufWriter::new(File::create(path)?);
    trace.write_jsonl(w)
}

fn run_exhaustive(args: &Args, cfg: &RunConfig) -> Result<bool, Failure> {
    let mut out = String::new();
    let seed = args.seed.unwrap_or(cfg.seed);
    let passed = if args.config.is_some() {
        let corrupt = cfg.corrupt.clone().unwrap_or_default();
        if corrupt.len() > 1 {
            return Err(Failure::Config("exhaustive exploration supports at most one corrupt id".into()));
        }
        let inputs = match &cfg.inputs {
            Inputs::List(v) => v.clone(),
            Inputs::Uniform(v) => vec![*v; cfg.n],
            Inputs::Random => return Err(Failure::Config("exhaustive exploration needs fixed inputs".into())),
        };
        let mut ocfg = OracleConfig::new(cfg.n, cfg.t, inputs, corrupt.first().copied());
        ocfg.alphabet_size = cfg.alphabet_size;
        let report = explore(&ocfg).map_err(oracle_failure)?;
        describe_oracle(&mut out, "exhaustive", &report);
        report.passed()
    } else {
        let suite = explore_small(0.01, seed).map_err(oracle_failure)?;
        let _ = writeln!(out, "exhaustive n=4 t=1 assignments={}", suite.assignments);
        describe_oracle(&mut out, "canonical", &suite.canonical);
        describe_oracle(&mut out, "spot_check", &suite.spot_check);
        suite.canonical.passed() && suite.spot_check.passed()
    };
    let _ = writeln!(out, "summary result={}", if passed { "PASS" } else { "FAIL" });
    print!("{out}");
    Ok(passed)
}

fn oracle_failure(e: OracleError) -> Failure {
    match e {
        OracleError::Protocol { .. } => Failure::Runtime(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

fn describe_oracle(out: &mut String, label: &str, r: &OracleReport) {
    let decisions: Vec<String> = r.decisions.iter().map(Value::to_string).collect();
    let _ = writeln!(
        out,
        "{label} branches={} nodes={} decisions={} counterexamples={}",
        r.branches,
        r.nodes,
        decisions.join(","),
        r.counterexamples.len()
    );
    for cx in &r.counterexamples {
        let _ = writeln!(out, "  counterexample {}", serde_json::to_string(cx).unwrap_or_default());
    }
}
