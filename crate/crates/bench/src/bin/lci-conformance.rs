//! Runs the two-rank conformance suite and prints one observation per line.
//!
//! Over TCP without `--rank`, the process runs rank 0 and launches a copy of
//! itself as rank 1, then prints the merged, sorted observations of both.

use std::process::{Command, ExitCode, Stdio};

use anyhow::{bail, Context as _, Result};
use clap::Parser;
use lci::conformance::{run_loopback, run_rank, Observation};
use lci_bench::Transport;

#[derive(Parser, Debug)]
#[command(name = "lci-conformance", about = "Two-rank lci conformance suite")]
struct Args {
    #[arg(long, value_enum, default_value_t = Transport::Loopback)]
    transport: Transport,
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long)]
    hosts: Option<String>,
    #[arg(long)]
    port_base: Option<u16>,
}

fn main() -> ExitCode {
    match run(&Args::parse()) {
        Ok(obs) => {
            for o in obs {
                println!("{o}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("FATAL: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn tcp_rank(args: &Args, rank: u32) -> Result<Vec<Observation>> {
    let mut init = lci::runtime_init_x()
        .attr("transport", "tcp")
        .attr("nranks", 2)
        .attr("rank", i64::from(rank));
    if let Some(h) = &args.hosts {
        init = init.attr("hosts", h.as_str());
    }
    if let Some(p) = args.port_base {
        init = init.attr("tcp_port_base", i64::from(p));
    }
    let rt = init.call().context("runtime init")?;
    let obs = run_rank(&rt.local())?;
    rt.finalize().context("finalize")?;
    Ok(obs)
}

fn run(args: &Args) -> Result<Vec<Observation>> {
    match (args.transport, args.rank) {
        (Transport::Loopback, _) => Ok(run_loopback()?),
        (Transport::Tcp, Some(rank)) => tcp_rank(args, rank),
        (Transport::Tcp, None) => {
            let exe = std::env::current_exe().context("locating this executable")?;
            let child = Command::new(exe)
                .args(std::env::args_os().skip(1))
                .args(["--rank", "1"])
                .stdout(Stdio::piped())
                .spawn()
                .context("launching rank 1")?;
            let mine = tcp_rank(args, 0);
            let out = child.wait_with_output().context("waiting for rank 1")?;
            if !out.status.success() {
                bail!("rank 1 exited with {}", out.status);
            }
            let mut obs = mine?;
            for line in String::from_utf8(out.stdout)?.lines() {
                obs.push(line.parse()?);
            }
            obs.sort();
            Ok(obs)
        }
    }
}
