//! Acceptance run: one PASS or FAIL line per criterion.

mod common;
mod completion;
mod descriptors;
mod imm;
mod matching;
mod pingpong;
mod stress;
mod transport;

use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Result};

type Check = fn() -> Result<String>;

const CRITERIA: &[(&str, Check)] = &[
    ("bit-packing", imm::bit_packing),
    ("matching oracle equivalence", matching::oracle_equivalence),
    ("in-order guarantee", stress::in_order),
    ("exactly-once completion", stress::exactly_once),
    ("transport equivalence", transport::equivalence),
    ("golden frame vector", transport::golden_vector),
    ("ping-pong over tcp", pingpong::tcp_four_threads),
    ("ping-pong loopback floor", pingpong::loopback_floor),
    ("synchronizer semantics", completion::synchronizer),
    ("descriptor convention", descriptors::convention),
    ("backpressure", stress::backpressure),
];

fn main() -> ExitCode {
    // Failures are reported on the PASS/FAIL line; keep panic noise out.
    panic::set_hook(Box::new(|_| {}));
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e:#} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
