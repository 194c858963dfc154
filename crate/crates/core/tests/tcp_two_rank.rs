//! Runs rank 0 in this process and rank 1 in a child copy of this test
//! binary, both over TCP on localhost.

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::{Command, Stdio};

use lci::conformance::{run_loopback, run_rank, Observation};
use lci::runtime::test_lock;
use lci::runtime_init_x;

const CHILD_ENV: &str = "LCI_TEST_TCP_CHILD";

/// A base port with `base` and `base + 1` both free right now.
fn free_port_base() -> u16 {
    loop {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = probe.local_addr().unwrap().port();
        drop(probe);
        if base < 65_000 && TcpListener::bind(("127.0.0.1", base + 1)).is_ok() {
            return base;
        }
    }
}

fn tcp_rank(rank: u32, base: u16) -> Vec<Observation> {
    let rt = runtime_init_x()
        .attr("transport", "tcp")
        .attr("nranks", 2)
        .attr("rank", i64::from(rank))
        .attr("tcp_port_base", i64::from(base))
        .attr("connect_timeout_ms", 20_000)
        .call()
        .expect("tcp init");
    let out = run_rank(&rt.local()).expect("suite");
    rt.finalize().expect("finalize");
    out
}

#[test]
#[ignore = "entry point for the child process of tcp_matches_loopback"]
fn child_rank() {
    let Ok(base) = std::env::var(CHILD_ENV) else {
        return;
    };
    for o in tcp_rank(1, base.parse().unwrap()) {
        println!("OBS\t{o}");
    }
}

#[test]
fn tcp_matches_loopback() {
    let _g = test_lock();
    let expected = run_loopback().expect("loopback suite");

    let base = free_port_base();
    let child = Command::new(std::env::current_exe().unwrap())
        .args([
            "--ignored",
            "--exact",
            "child_rank",
            "--nocapture",
            "--test-threads=1",
        ])
        .env(CHILD_ENV, base.to_string())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut got = tcp_rank(0, base);
    let output = child.wait_with_output().unwrap();
    assert!(output.status.success(), "child rank failed");
    for line in BufReader::new(&output.stdout[..]).lines() {
        // The harness may print its own banner on the same line.
        let line = line.unwrap();
        if let Some(at) = line.find("OBS\t") {
            got.push(line[at + 4..].parse().unwrap());
        }
    }
    got.sort();
    assert_eq!(got, expected);
}
