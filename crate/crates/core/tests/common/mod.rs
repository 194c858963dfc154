#![allow(dead_code)]

use std::time::{Duration, Instant};

use lci::{runtime_init_x, CompletionQueue, PostResult, Runtime, Status, Synchronizer};

pub fn loopback(nranks: u32) -> Runtime {
    loopback_with(nranks, &[])
}

pub fn loopback_with(nranks: u32, attrs: &[(&str, i64)]) -> Runtime {
    let mut init = runtime_init_x()
        .attr("transport", "loopback")
        .attr("nranks", i64::from(nranks));
    for (k, v) in attrs {
        init = init.attr(k, *v);
    }
    init.call().expect("runtime init")
}

/// Progresses every rank until `done` holds; panics after 30 s.
pub fn drive(rt: &Runtime, mut done: impl FnMut() -> bool) {
    let start = Instant::now();
    while !done() {
        if !rt.progress_all().expect("progress") {
            std::thread::yield_now();
        }
        assert!(
            start.elapsed() < Duration::from_secs(30),
            "timed out waiting for progress"
        );
    }
}

pub fn wait(rt: &Runtime, sync: &Synchronizer) -> Vec<Status> {
    let mut out = None;
    drive(rt, || {
        out = sync.try_take();
        out.is_some()
    });
    out.unwrap()
}

pub fn pop_n(rt: &Runtime, cq: &CompletionQueue, n: usize) -> Vec<Status> {
    let mut got = Vec::new();
    drive(rt, || {
        while let Some(s) = cq.pop() {
            got.push(s);
        }
        got.len() >= n
    });
    got
}

/// Re-posts through `post` until accepted, progressing in between.
pub fn post(rt: &Runtime, mut post: impl FnMut() -> lci::Result<PostResult>) -> PostResult {
    loop {
        match post().expect("post") {
            PostResult::Retry => {
                rt.progress_all().expect("progress");
            }
            r => return r,
        }
    }
}

/// Posts and waits for the operation's status on `sync`.
pub fn complete(
    rt: &Runtime,
    sync: &Synchronizer,
    f: impl FnMut() -> lci::Result<PostResult>,
) -> Status {
    match post(rt, f) {
        PostResult::Done(s) => s,
        PostResult::Posted => wait(rt, sync).remove(0),
        PostResult::Retry => unreachable!(),
    }
}

pub fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed) ^ (i >> 8) as u8)
        .collect()
}
