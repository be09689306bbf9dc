//! Runs every verification suite and prints one line per suite.
//!
//! Usage: `cargo run --release --example run_checks -- [--fault]`

use s2s_stereo::check::{run_all, CheckOptions};

fn main() -> s2s_stereo::Result<()> {
    let opts = CheckOptions {
        seed: 0,
        fault_injection: std::env::args().any(|a| a == "--fault"),
    };
    let report = run_all(&opts)?;
    for s in &report.suites {
        println!(
            "{} {:<26} max error {:.3e}  tolerance {:.1e}  cases {:>3}  {:.2} s",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.max_error,
            s.tolerance,
            s.cases,
            s.seconds
        );
    }
    println!("overall: {}", if report.passed { "pass" } else { "fail" });
    Ok(())
}
