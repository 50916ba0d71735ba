//! Runs the built-in verification suites and prints each check's margin.

use mpgd::harness::{verify, Suite};

fn main() -> mpgd::Result<()> {
    let report = verify(Suite::All, 0)?;
    for c in &report.checks {
        println!("[{}] {:<6} {:<50} value {:.3e}, margin {:.3e}", if c.passed { "ok" } else { "FAIL" }, c.suite.to_string(), c.name, c.value, c.margin);
    }
    println!("overall: {}", if report.passed { "passed" } else { "failed" });
    Ok(())
}
