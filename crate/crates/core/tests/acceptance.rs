//! End-to-end acceptance checks, one PASS/FAIL/SKIP line per criterion.
//!
//! Runs as a plain binary so the lines come out in order as each check
//! finishes. Set `ADANORM_FASHION_MNIST` to a directory holding the four
//! uncompressed Fashion-MNIST IDX files to enable A8; by default the
//! workspace's `data/fashion-mnist` is tried.

use std::path::PathBuf;
use std::process::ExitCode;

use adanorm_core::experiments::{run_suite, SensorBenchmark};

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // `cargo test -- --list` probes every test binary; nothing to list.
        return ExitCode::SUCCESS;
    }
    let fashion = std::env::var_os("ADANORM_FASHION_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"));
    let suite = run_suite(&SensorBenchmark::default(), Some(&fashion), |c| println!("{c}"))
        .expect("acceptance pipeline runs to completion");
    let failed: Vec<_> = suite.criteria.iter().filter(|c| !c.passed()).map(|c| c.id).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria met");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
