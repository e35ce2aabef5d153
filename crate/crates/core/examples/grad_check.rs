//! Runs the numerical gradient suite and prints one line per check.
//!
//! `cargo run --release --example grad_check [full]`

use mpc_bco::gradcheck::{run_suite, SuiteSize};

fn main() {
    let full = std::env::args().nth(1).as_deref() == Some("full");
    let size = if full { SuiteSize::FULL } else { SuiteSize::QUICK };
    let t = std::time::Instant::now();
    let results = run_suite(size, 0);
    for r in &results {
        println!("{}", r.line());
    }
    println!("{} of {} passed in {:.1?}", results.iter().filter(|r| r.passed).count(), results.len(), t.elapsed());
}
