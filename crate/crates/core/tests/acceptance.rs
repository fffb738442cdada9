//! Runs the ten validation criteria at their stated tolerances and prints
//! one line per criterion. Exits non-zero if any criterion fails.

use insider_volterra::suite::{Suite, SuiteOptions};

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; only a
    // `--list` request needs an answer.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let suite = Suite::new(SuiteOptions::default());
    let mut failed = 0;
    for id in 1..=10 {
        let r = suite.run(id);
        println!("{}", r.line());
        if !r.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
