//! `causalec`: run scenarios, audit traces, sweep seeds, self-test the codec.
//!
//! Exit codes: 0 success, 1 a check failed, 2 invalid input, 3 step limit hit.
//! Human-readable output goes to standard error; `check` prints its JSON
//! report on standard output.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use causalec::checker::{check_all, control_verdict, negative_controls, CheckReport};
use causalec::codec::self_check;
use causalec::sim::{run, RunStatus, Scenario};
use causalec::trace::{ExecutionTrace, TraceEvent};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;

const EXIT_FAIL: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_STEP_LIMIT: u8 = 3;

#[derive(Parser)]
#[command(name = "causalec", version, about = "Causally consistent erasure-coded storage simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Force FIFO channels.
    #[arg(long)]
    fifo: bool,
    /// Override the scenario's step limit.
    #[arg(long)]
    step_limit: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write trace.jsonl and storage.csv.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a trace; prints a JSON report.
    Check {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run and check a range of seeds; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        flags: RunFlags,
        /// Half-open range `A..B`, or `A..=B`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Append rows for the checker's corrupted-trace controls.
        #[arg(long)]
        with_negative_control: bool,
    },
    /// Exhaustive MDS check for n <= 8 and randomized round trips.
    CodecTest {
        #[arg(long, default_value_t = 1000)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_seeds(text: &str) -> Result<std::ops::Range<u64>, String> {
    let bad = || format!("seed range {text:?} is not of the form A..B or A..=B");
    let (a, b, inclusive) = if let Some((a, b)) = text.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = text.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    let end = if inclusive { b.checked_add(1).ok_or_else(bad)? } else { b };
    if a >= end {
        return Err(format!("seed range {text:?} is empty"));
    }
    Ok(a..end)
}

fn load_scenario(flags: &RunFlags) -> Result<Scenario, String> {
    let text = fs::read_to_string(&flags.scenario).map_err(|e| format!("{}: {e}", flags.scenario.display()))?;
    let mut sc = Scenario::from_json(&text).map_err(|e| format!("{}: {e}", flags.scenario.display()))?;
    sc.fifo |= flags.fifo;
    if let Some(limit) = flags.step_limit {
        sc.step_limit = limit;
    }
    sc.validate().map_err(|e| e.to_string())?;
    Ok(sc)
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_run(flags: &RunFlags, seed: Option<u64>, out: &Path) -> u8 {
    let mut sc = match load_scenario(flags) {
        Ok(sc) => sc,
        Err(e) => {
            error!("{e}");
            return EXIT_INVALID;
        }
    };
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    let outcome = match run(&sc) {
        Ok(o) => o,
        Err(e) => {
            error!("{e}");
            return EXIT_INVALID;
        }
    };
    let written = fs::create_dir_all(out)
        .map_err(|e| format!("{}: {e}", out.display()))
        .and_then(|_| write_file(&out.join("trace.jsonl"), &outcome.trace.to_jsonl()))
        .and_then(|_| write_file(&out.join("storage.csv"), &outcome.trace.storage_csv()));
    if let Err(e) = written {
        error!("{e}");
        return EXIT_INVALID;
    }
    info!(
        "seed {}: {:?} at step {}, {} events, {} decodes",
        sc.seed,
        outcome.status,
        outcome.final_step,
        outcome.trace.events.len(),
        outcome.trace.decode_count()
    );
    match outcome.status {
        RunStatus::Quiescent => 0,
        RunStatus::StepLimit => EXIT_STEP_LIMIT,
    }
}

fn cmd_check(path: &Path) -> u8 {
    let trace = match fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| ExecutionTrace::from_jsonl(&t).map_err(|e| e.to_string()))
    {
        Ok(t) => t,
        Err(e) => {
            error!("{}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    if trace.header().is_none() {
        error!("{}: trace has no header", path.display());
        return EXIT_INVALID;
    }
    let report = check_all(&trace);
    // a closed stdout (for example a pager that quit) must not turn into a panic
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    for f in report.failures() {
        error!("{f}");
    }
    if report.passed() {
        0
    } else {
        EXIT_FAIL
    }
}

struct Row {
    label: String,
    status: &'static str,
    passed: bool,
    decodes: usize,
    violations: usize,
    crashes: usize,
    completed: usize,
    pending: usize,
    final_step: u64,
    failure: String,
}

impl Row {
    const HEADER: &'static str = "seed,status,passed,decodes,violations,crashes,completed,pending,final_step,failure\n";

    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},\"{}\"\n",
            self.label,
            self.status,
            self.passed,
            self.decodes,
            self.violations,
            self.crashes,
            self.completed,
            self.pending,
            self.final_step,
            self.failure.replace('"', "'")
        )
    }
}

fn summarize(
    label: String,
    status: &'static str,
    final_step: u64,
    trace: &ExecutionTrace,
    report: &CheckReport,
) -> Row {
    let invoked = trace.events.iter().filter(|e| matches!(e, TraceEvent::Invoke { .. })).count();
    let completed = trace.events.iter().filter(|e| matches!(e, TraceEvent::Respond { .. })).count();
    Row {
        label,
        status,
        passed: report.passed() && status == "quiescent",
        decodes: report.decodes,
        violations: report.runtime_violations.len(),
        crashes: trace.events.iter().filter(|e| matches!(e, TraceEvent::Crash { .. })).count(),
        completed,
        pending: invoked - completed,
        final_step,
        failure: report.failures().join("; "),
    }
}

fn cmd_sweep(flags: &RunFlags, seeds: &str, out: &Path, with_control: bool) -> u8 {
    let (sc, range) = match load_scenario(flags).and_then(|sc| Ok((sc, parse_seeds(seeds)?))) {
        Ok(x) => x,
        Err(e) => {
            error!("{e}");
            return EXIT_INVALID;
        }
    };
    if let Err(e) = fs::create_dir_all(out) {
        error!("{}: {e}", out.display());
        return EXIT_INVALID;
    }
    let started = Instant::now();
    let first = range.start;
    let results: Vec<(u64, Row, Option<ExecutionTrace>)> = range
        .into_par_iter()
        .map(|seed| {
            let mut sc = sc.clone();
            sc.seed = seed;
            let outcome = run(&sc).expect("scenario validated");
            let report = check_all(&outcome.trace);
            let status = match outcome.status {
                RunStatus::Quiescent => "quiescent",
                RunStatus::StepLimit => "step_limit",
            };
            let row = summarize(seed.to_string(), status, outcome.final_step, &outcome.trace, &report);
            // failures are kept for inspection, the first seed as the base for controls
            let keep = (!row.passed || (with_control && seed == first)).then_some(outcome.trace);
            (seed, row, keep)
        })
        .collect();

    let mut csv = String::from(Row::HEADER);
    let mut all_pass = true;
    let mut kept_failure = false;
    for (seed, row, trace) in &results {
        csv.push_str(&row.csv());
        if !row.passed {
            all_pass = false;
            error!("seed {seed} failed: {}", row.failure);
            if !kept_failure {
                if let Some(t) = trace {
                    let path = out.join(format!("failure_seed_{seed}.jsonl"));
                    if let Err(e) = write_file(&path, &t.to_jsonl()) {
                        error!("{e}");
                    }
                    kept_failure = true;
                }
            }
        }
    }
    if with_control {
        let base = results.first().and_then(|(_, row, t)| t.as_ref().filter(|_| row.passed));
        match base {
            Some(trace) => {
                for (name, corrupted) in negative_controls(trace) {
                    let verdict = control_verdict(name, &corrupted);
                    let report = check_all(&corrupted);
                    let mut row = summarize(format!("control:{name}"), "corrupted", 0, &corrupted, &report);
                    row.passed = !verdict.is_fail();
                    if !row.passed {
                        all_pass = false;
                        info!("control {name} rejected as intended");
                    }
                    csv.push_str(&row.csv());
                }
            }
            None => error!("no passing run to build negative controls from"),
        }
    }
    if let Err(e) = write_file(&out.join("sweep.csv"), &csv) {
        error!("{e}");
        return EXIT_INVALID;
    }
    let passed = results.iter().filter(|r| r.1.passed).count();
    let decodes: usize = results.iter().map(|r| r.1.decodes).sum();
    info!("{passed}/{} seeds passed, {decodes} decodes, {:.1?}", results.len(), started.elapsed());
    if all_pass {
        0
    } else {
        EXIT_FAIL
    }
}

fn cmd_codec_test(rounds: usize, seed: u64) -> u8 {
    let started = Instant::now();
    let mut ok = true;
    for n in 1..=8 {
        for k in 1..=n {
            let reps = if (n, k) == (4, 2) || (n, k) == (5, 3) { rounds } else { 0 };
            match self_check(n, k, 32, reps, seed) {
                Ok(r) => info!("({n},{k}): {} subsets, {} round trips", r.subsets, r.round_trips),
                Err(e) => {
                    error!("{e}");
                    ok = false;
                }
            }
        }
    }
    info!("codec self-test finished in {:.1?}", started.elapsed());
    if ok {
        0
    } else {
        EXIT_FAIL
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAUSALEC_LOG", "info")).init();
    let cli = Cli::parse();
    let code = match &cli.cmd {
        Cmd::Run { flags, seed, out } => cmd_run(flags, *seed, out),
        Cmd::Check { trace } => cmd_check(trace),
        Cmd::Sweep { flags, seeds, out, with_negative_control } => cmd_sweep(flags, seeds, out, *with_negative_control),
        Cmd::CodecTest { rounds, seed } => cmd_codec_test(*rounds, *seed),
    };
    ExitCode::from(code)
}
