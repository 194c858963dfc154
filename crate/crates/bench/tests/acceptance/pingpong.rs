use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context as _, Result};
use lci_bench::{run_pingpong, BenchConfig, CSV_HEADER};

use crate::common::free_port_base;

pub fn tcp_four_threads() -> Result<String> {
    let port = free_port_base().to_string();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_lci-pingpong"))
        .args(["--transport", "tcp", "--port-base", &port])
        .args([
            "--threads",
            "4",
            "--msg-size",
            "8",
            "--iters",
            "100000",
            "--reps",
            "5",
        ])
        .output()
        .context("running lci-pingpong")?;
    let took = start.elapsed();
    let stderr = String::from_utf8_lossy(&out.stderr);
    // Any payload mismatch is fatal and exits non-zero.
    ensure!(out.status.success(), "exited with {}: {stderr}", out.status);
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    let stdout = String::from_utf8(out.stdout)?;
    let lines: Vec<&str> = stdout.lines().collect();
    ensure!(
        lines.len() == 2 && lines[0] == CSV_HEADER,
        "unexpected report {stdout:?}"
    );
    let fields: Vec<&str> = lines[1].split(',').collect();
    ensure!(fields.len() == 8, "malformed row {:?}", lines[1]);
    let mean: f64 = fields[6].parse()?;
    let stddev: f64 = fields[7].parse()?;
    ensure!(
        mean > 0.0 && stddev.is_finite(),
        "bad statistics {mean} {stddev}"
    );
    Ok(format!(
        "4 threads x 100000 iters x 5 reps over 2 processes in {:.1}s, {mean:.0} +- {stddev:.0} msgs/s, 0 mismatches",
        took.as_secs_f64()
    ))
}

pub fn loopback_floor() -> Result<String> {
    let cfg = BenchConfig {
        iters: 100_000,
        reps: 3,
        ..BenchConfig::default()
    };
    let report = run_pingpong(&cfg)?.context("loopback always reports")?;
    ensure!(
        report.total_messages().iter().all(|&n| n == cfg.iters),
        "message count differs from iters"
    );
    ensure!(
        report.rate_msgs_per_s > 1e5,
        "{:.0} msgs/s is below the 1e5 floor",
        report.rate_msgs_per_s
    );
    Ok(format!(
        "1 thread: {:.0} +- {:.0} msgs/s over {} reps",
        report.rate_msgs_per_s,
        report.stddev,
        report.reps.len()
    ))
}
