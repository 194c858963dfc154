//! Multithreaded ping-pong message-rate benchmark.
//!
//! Over TCP without `--rank`, the process runs rank 0 and launches a copy of
//! itself as rank 1 on the same host.

use std::process::{Command, ExitCode};

use anyhow::{bail, Context as _, Result};
use clap::Parser;
use lci_bench::{emit_report, run_pingpong, BenchConfig, CompMode, DeviceMode, Format, Transport};

#[derive(Parser, Debug)]
#[command(
    name = "lci-pingpong",
    about = "Multithreaded ping-pong message rate over lci"
)]
struct Args {
    #[arg(long, value_enum, default_value_t = Transport::Loopback, env = "LCI_TRANSPORT")]
    transport: Transport,
    /// This process's rank over TCP; omit to launch both ranks locally.
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long, default_value_t = 2)]
    nranks: u32,
    /// Comma-separated hosts indexed by rank.
    #[arg(long)]
    hosts: Option<String>,
    #[arg(long)]
    port_base: Option<u16>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    msg_size: u64,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    #[arg(long, default_value_t = 1000)]
    warmup: u64,
    #[arg(long, value_enum, default_value_t = CompMode::Cq)]
    comp: CompMode,
    #[arg(long, value_enum, default_value_t = DeviceMode::Shared)]
    device_mode: DeviceMode,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    output: Format,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.nranks != 2 {
        eprintln!("error: the benchmark needs --nranks 2");
        return ExitCode::from(2);
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("FATAL: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: &Args) -> Result<()> {
    let mut cfg = BenchConfig {
        transport: args.transport,
        rank: args.rank.unwrap_or(0),
        hosts: args.hosts.clone(),
        port_base: args.port_base,
        threads: args.threads as usize,
        msg_size: args.msg_size as usize,
        iters: args.iters,
        warmup: args.warmup,
        comp: args.comp,
        device_mode: args.device_mode,
        reps: args.reps as usize,
    };
    let child = match (args.transport, args.rank) {
        (Transport::Tcp, None) => {
            cfg.rank = 0;
            let exe = std::env::current_exe().context("locating this executable")?;
            let child = Command::new(exe)
                .args(std::env::args_os().skip(1))
                .args(["--rank", "1"])
                .spawn()
                .context("launching rank 1")?;
            Some(child)
        }
        _ => None,
    };
    let report = run_pingpong(&cfg);
    if let Some(mut child) = child {
        let status = child.wait().context("waiting for rank 1")?;
        if !status.success() {
            bail!("rank 1 exited with {status}");
        }
    }
    if let Some(report) = report? {
        eprintln!(
            "{} threads x {} iters: {:.0} +- {:.0} msgs/s over {} reps",
            report.threads,
            report.iters,
            report.rate_msgs_per_s,
            report.stddev,
            report.reps.len()
        );
        print!("{}", emit_report(&report, args.output));
    }
    Ok(())
}
