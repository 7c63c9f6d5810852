//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use qkd_core::oracle::{run_suite, Suite, SuiteOptions, TrialReport};

const SEED: u64 = 0x5eed_0001;

struct Criterion {
    id: u32,
    title: &'static str,
    suite: Suite,
    budget: Duration,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, title: "Kato plug-back", suite: Suite::KatoPlugback, budget: Duration::from_secs(1) },
    Criterion { id: 2, title: "Kato Monte Carlo", suite: Suite::KatoMc, budget: Duration::from_secs(120) },
    Criterion { id: 3, title: "decoy soundness", suite: Suite::Decoy, budget: Duration::from_secs(30) },
    Criterion { id: 4, title: "ground-truth bound coverage", suite: Suite::GroundTruth, budget: Duration::from_secs(1200) },
    Criterion { id: 5, title: "correctness parameter", suite: Suite::Correctness, budget: Duration::from_secs(300) },
    Criterion { id: 6, title: "hash-family properties", suite: Suite::Hash, budget: Duration::from_secs(60) },
    Criterion { id: 7, title: "Fock-oracle agreement", suite: Suite::Fock, budget: Duration::from_secs(30) },
    Criterion { id: 8, title: "end-to-end determinism and agreement", suite: Suite::EndToEnd, budget: Duration::from_secs(600) },
    Criterion { id: 9, title: "conservative-rounding audit", suite: Suite::Rounding, budget: Duration::from_secs(60) },
];

fn summary(r: &TrialReport) -> String {
    let mut s = format!("{}: {}/{} (target {:.3e})", r.name, r.violations, r.trials, r.inflation * r.target_eps);
    if !r.detail.is_empty() {
        s.push_str(&format!(" [{}]", r.detail));
    }
    s
}

fn main() -> ExitCode {
    // Honour `cargo test -- <filter>` and `--list` the way the default harness does.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let filter: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let total = Instant::now();
    for c in &CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| c.suite.name().contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run_suite(c.suite, &SuiteOptions { seed: SEED, trials: None }) {
            Ok((reports, _)) => {
                let elapsed = start.elapsed();
                let ok = reports.iter().all(|r| r.pass) && elapsed <= c.budget;
                let lines: Vec<String> = reports.iter().map(summary).collect();
                (ok, lines.join("; "))
            }
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        println!(
            "{} [{}] {} ({:.2}s of {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
        failed += !pass as u32;
    }
    println!("acceptance: {failed} failed, total {:.1}s", total.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
