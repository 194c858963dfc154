use std::net::TcpListener;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use lci::{runtime_init_x, CompletionQueue, PostResult, Runtime, Status, Synchronizer};

pub fn loopback_with(nranks: u32, attrs: &[(&str, i64)]) -> Result<Runtime> {
    let mut init = runtime_init_x()
        .attr("transport", "loopback")
        .attr("nranks", i64::from(nranks));
    for (k, v) in attrs {
        init = init.attr(k, *v);
    }
    Ok(init.call()?)
}

/// Progresses every rank until `done` holds, for at most 60 s.
pub fn drive(rt: &Runtime, mut done: impl FnMut() -> bool) -> Result<()> {
    let start = Instant::now();
    while !done() {
        if !rt.progress_all()? {
            std::thread::yield_now();
        }
        ensure!(
            start.elapsed() < Duration::from_secs(60),
            "timed out waiting for progress"
        );
    }
    Ok(())
}

pub fn wait(rt: &Runtime, sync: &Synchronizer) -> Result<Vec<Status>> {
    let mut out = None;
    drive(rt, || {
        out = sync.try_take();
        out.is_some()
    })?;
    Ok(out.expect("set by drive"))
}

pub fn pop_n(rt: &Runtime, cq: &CompletionQueue, n: usize) -> Result<Vec<Status>> {
    let mut got = Vec::new();
    drive(rt, || {
        while let Some(s) = cq.pop() {
            got.push(s);
        }
        got.len() >= n
    })?;
    Ok(got)
}

/// Re-posts until accepted, progressing in between.
pub fn post(rt: &Runtime, post: impl Fn() -> lci::Result<PostResult>) -> Result<PostResult> {
    loop {
        match post()? {
            PostResult::Retry => {
                rt.progress_all()?;
            }
            r => return Ok(r),
        }
    }
}

pub fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed) ^ (i >> 8) as u8)
        .collect()
}

/// A base port with `base` and `base + 1` both free right now.
pub fn free_port_base() -> u16 {
    loop {
        let probe = TcpListener::bind("127.0.0.1:0").expect("bind an ephemeral port");
        let base = probe.local_addr().expect("bound address").port();
        drop(probe);
        if base < 65_000 && TcpListener::bind(("127.0.0.1", base + 1)).is_ok() {
            return base;
        }
    }
}
