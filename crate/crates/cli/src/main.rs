//! `qkd`: key-rate reports, seeded protocol runs, loss sweeps and bound validation.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qkd_core::bounds::{expected_observables, security_result, ExpectedObservables, Observables, SecurityResult};
use qkd_core::channel::{write_trace, ChannelModel};
use qkd_core::oracle::{run_suite, Suite, SuiteOptions, TrialReport};
use qkd_core::postprocessing::{n_ec, EcOptions};
use qkd_core::protocol::{run_protocol, write_keys, Outcome, RunOptions};
use qkd_core::ProtocolConstants;
use serde::Serialize;
use serde_json::json;

/// Version of every JSON and CSV layout written by this tool.
const SCHEMA_VERSION: u32 = 1;
const CSV_HEADER: &str = "distance_km,eta_ch,N_fin,rate_per_pulse,eps_total";

const EXIT_USAGE: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_SUITE_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "qkd", version, about = "Finite-key decoy-state BB84 toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the finite-key bounds and write a JSON report with every intermediate.
    Keyrate(KeyrateArgs),
    /// Run the full protocol over a simulated channel and write keys, transcript and report.
    Simulate(SimulateArgs),
    /// Sweep the fibre length and write the key length per distance as CSV.
    Scan(ScanArgs),
    /// Run the validation suites and write their reports as a JSON array.
    VerifyBounds(VerifyArgs),
}

#[derive(Args)]
struct KeyrateArgs {
    /// Protocol constants (JSON).
    #[arg(long)]
    params: PathBuf,
    /// Channel model (JSON); supplies the expected counts, and the observed counts when --observables is absent.
    #[arg(long, required_unless_present = "observables")]
    channel: Option<PathBuf>,
    /// Observed counts (JSON); without --channel the expected counts are plug-in estimates from them.
    #[arg(long)]
    observables: Option<PathBuf>,
    /// Report file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Protocol constants (JSON).
    #[arg(long)]
    params: PathBuf,
    /// Channel model (JSON).
    #[arg(long)]
    channel: PathBuf,
    /// Master seed of every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "qkd-run")]
    out: PathBuf,
    /// Also write the per-round trace, including hidden photon numbers, to trace.tsv.
    #[arg(long)]
    debug_trace: bool,
    /// Corrupt the syndrome in transit, forcing a verification failure.
    #[arg(long)]
    tamper: bool,
}

#[derive(Args)]
struct ScanArgs {
    /// Protocol constants (JSON).
    #[arg(long)]
    params: PathBuf,
    /// Fibre channel model (JSON) with `loss_db_per_km`.
    #[arg(long)]
    channel: PathBuf,
    /// Distances in km: a comma-separated list or `start:stop:step`.
    #[arg(long, default_value = "0:100:10")]
    grid: String,
    /// CSV file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated suites [default: all]. One of: kato-plugback, kato-mc, decoy,
    /// ground-truth, correctness, hash, fock, end-to-end, rounding.
    #[arg(long, value_delimiter = ',')]
    suite: Option<Vec<String>>,
    /// Master seed of every suite.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trial count for every selected suite [default: each suite's full size].
    #[arg(long)]
    trials: Option<u64>,
    /// Report file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure that maps onto an exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

impl From<qkd_core::Error> for Failure {
    fn from(e: qkd_core::Error) -> Self {
        usage(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        usage(e.to_string())
    }
}

type CmdResult = Result<u8, Failure>;

fn load_params(path: &Path) -> Result<ProtocolConstants, Failure> {
    ProtocolConstants::from_json_file(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_channel(path: &Path) -> Result<ChannelModel, Failure> {
    ChannelModel::from_json_file(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_observables(path: &Path) -> Result<Observables, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Writes to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn pretty(v: &impl Serialize) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn keyrate_report(c: &ProtocolConstants, obs: &Observables, exp: &ExpectedObservables) -> Result<SecurityResult, Failure> {
    let ec = n_ec(obs.n_sift, c.e_bit_assumed, EcOptions::default().efficiency)?;
    Ok(security_result(c, obs, exp, ec)?)
}

fn cmd_keyrate(args: &KeyrateArgs) -> CmdResult {
    let c = load_params(&args.params)?;
    let ch = args.channel.as_deref().map(load_channel).transpose()?;
    let obs_in = args.observables.as_deref().map(load_observables).transpose()?;
    let (obs, exp) = match (&ch, obs_in) {
        (Some(ch), obs) => {
            let exp = expected_observables(&c, ch);
            (obs.unwrap_or_else(|| exp.rounded()), exp)
        }
        (None, Some(obs)) => (obs, ExpectedObservables::from_observed(&c, &obs)?),
        (None, None) => return Err(usage("keyrate needs --observables or --channel")),
    };
    let result = keyrate_report(&c, &obs, &exp)?;
    let abort = result.abort;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "keyrate",
        "config": {
            "params": c,
            "channel": ch,
            "observables": obs,
            "ec_efficiency": EcOptions::default().efficiency,
        },
        "expected": exp,
        "result": result,
    });
    emit(args.out.as_deref(), &pretty(&report)?)?;
    Ok(if abort { EXIT_ABORT } else { 0 })
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let c = load_params(&args.params)?;
    let ch = load_channel(&args.channel)?;
    let opts = RunOptions { seed: args.seed, tamper: args.tamper, record_rounds: args.debug_trace, ..Default::default() };
    let run = run_protocol(&c, &ch, &opts)?;
    fs::create_dir_all(&args.out)?;
    for (name, keys) in [("alice.key", &run.alice), ("bob.key", &run.bob)] {
        let mut w = BufWriter::new(File::create(args.out.join(name))?);
        write_keys(&mut w, &[&keys.final_key])?;
        w.flush()?;
    }
    fs::write(args.out.join("transcript.bin"), run.transcript.to_bytes())?;
    if let Some(rounds) = &run.rounds {
        let mut w = BufWriter::new(File::create(args.out.join("trace.tsv"))?);
        write_trace(&mut w, rounds.iter().enumerate().map(|(i, r)| (i as u64, *r)))?;
        w.flush()?;
    }
    let outcome = match run.outcome {
        Outcome::Key => "key",
        Outcome::AbortedLength => "aborted-length",
        Outcome::AbortedVerification => "aborted-verification",
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "seed": args.seed,
        "config": {
            "params": c,
            "channel": ch,
            "tamper": args.tamper,
            "debug_trace": args.debug_trace,
            "ec_efficiency": opts.ec.efficiency,
        },
        "outcome": outcome,
        "key_length": run.alice.final_key.len(),
        "keys_equal": run.alice.final_key == run.bob.final_key,
        "transcript_bytes": run.transcript.to_bytes().len(),
        "expected": run.expected,
        "result": run.security,
    });
    fs::write(args.out.join("report.json"), pretty(&report)?)?;
    eprintln!("{outcome}: {} key bits written to {}", run.alice.final_key.len(), args.out.display());
    Ok(if run.outcome == Outcome::Key { 0 } else { EXIT_ABORT })
}

fn parse_grid(grid: &str) -> Result<Vec<f64>, Failure> {
    let bad = || usage(format!("bad --grid {grid:?}: expected a list like 0,25,50 or start:stop:step"));
    let num = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    let points = if grid.contains(':') {
        let parts: Vec<f64> = grid.split(':').map(num).collect::<Option<_>>().ok_or_else(bad)?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if step <= 0.0 || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + step * i as f64).collect()
    } else {
        grid.split(',').map(num).collect::<Option<Vec<_>>>().ok_or_else(bad)?
    };
    if points.is_empty() || points.iter().any(|&d| d < 0.0) {
        return Err(bad());
    }
    Ok(points)
}

fn cmd_scan(args: &ScanArgs) -> CmdResult {
    let c = load_params(&args.params)?;
    let ch = load_channel(&args.channel)?;
    if ch.loss_db_per_km.is_none() {
        return Err(usage("scan needs a fibre channel with loss_db_per_km"));
    }
    let grid = parse_grid(&args.grid)?;
    let config = serde_json::to_string(&json!({
        "schema_version": SCHEMA_VERSION,
        "command": "scan",
        "params": c,
        "channel": ch,
        "grid": grid,
    }))?;
    let mut out = format!("# {config}\n{CSV_HEADER}\n");
    for d in grid {
        let at = ch.at_distance(d)?;
        let exp = expected_observables(&c, &at);
        let r = keyrate_report(&c, &exp.rounded(), &exp)?;
        let rate = r.key_length as f64 / c.n() as f64;
        out.push_str(&format!("{d},{:e},{},{rate:e},{:e}\n", at.transmittance(), r.n_fin, r.eps_total));
    }
    emit(args.out.as_deref(), &out)?;
    Ok(0)
}

fn cmd_verify_bounds(args: &VerifyArgs) -> CmdResult {
    let suites = match &args.suite {
        None => Suite::ALL.to_vec(),
        Some(names) => {
            let names: Vec<&str> = names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            if names.is_empty() {
                return Err(usage("no suites selected"));
            }
            names
                .iter()
                .map(|n| Suite::from_name(n).ok_or_else(|| usage(format!("unknown suite {n:?}"))))
                .collect::<Result<_, _>>()?
        }
    };
    if args.trials == Some(0) {
        return Err(usage("--trials must be positive"));
    }
    let mut reports: Vec<TrialReport> = Vec::new();
    for s in suites {
        let (r, secs) = run_suite(s, &SuiteOptions { seed: args.seed, trials: args.trials })?;
        for rep in &r {
            eprintln!("{} {} ({secs:.2}s) {}/{}", if rep.pass { "PASS" } else { "FAIL" }, rep.name, rep.violations, rep.trials);
        }
        reports.extend(r);
    }
    emit(args.out.as_deref(), &pretty(&reports)?)?;
    Ok(if reports.iter().all(|r| r.pass) { 0 } else { EXIT_SUITE_FAILED })
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Keyrate(a) => cmd_keyrate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Scan(a) => cmd_scan(a),
        Command::VerifyBounds(a) => cmd_verify_bounds(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
