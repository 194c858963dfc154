//! A two-rank suite that exercises every operation and records what each
//! rank observed.
//!
//! Each rank runs [`run_rank`] against its own [`Context`]; the ranks talk
//! only through the library, so the same code runs as two threads over the
//! loopback transport or as two processes over TCP. The observations are
//! plain strings, sorted per scenario, so runs on different transports can
//! be compared directly.

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::completion::{CompletionQueue, Synchronizer};
use crate::error::{Error, Result};
use crate::matching::{EngineKind, MatchingEngine};
use crate::memory::Region;
use crate::ops::{post_am_x, post_get_x, post_put_x, post_recv_x, post_send_x, PostResult};
use crate::rcomp::RcompPath;
use crate::runtime::{runtime_init_x, Context};
use crate::types::{BufferDesc, MatchPolicy, Rank, Status, Tag};

const STEP_TIMEOUT: Duration = Duration::from_secs(60);
const BARRIER_TAG: u64 = 60_000;
const CTRL_TAG: u64 = 50_000;

/// One line of what a rank saw during a scenario.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Observation {
    pub scenario: &'static str,
    pub rank: u32,
    pub detail: String,
}

impl std::fmt::Display for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\t{}\t{}", self.scenario, self.rank, self.detail)
    }
}

impl std::str::FromStr for Observation {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.splitn(3, '\t');
        let (Some(name), Some(rank), Some(detail)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::BadArg(format!("malformed observation {line:?}")));
        };
        let scenario = SCENARIOS
            .iter()
            .map(|(n, _)| *n)
            .find(|n| *n == name)
            .ok_or_else(|| Error::BadArg(format!("unknown scenario {name:?}")))?;
        let rank = rank
            .parse()
            .map_err(|_| Error::BadArg(format!("bad rank in {line:?}")))?;
        Ok(Observation {
            scenario,
            rank,
            detail: detail.to_string(),
        })
    }
}

pub(crate) fn pattern(len: usize, seed: u64) -> Vec<u8> {
    (0..len)
        .map(|i| {
            (i as u64)
                .wrapping_mul(2_654_435_761)
                .wrapping_add(seed.wrapping_mul(97)) as u8
                ^ (i >> 8) as u8
        })
        .collect()
}

/// FNV-1a, enough to tell payloads apart in observation strings.
pub(crate) fn digest(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

fn describe(s: &Status) -> String {
    format!(
        "{} peer={} tag={} len={} digest={:016x} rcomp={} ctx={}",
        s.op.name(),
        s.peer,
        s.tag,
        s.buffer.len(),
        digest(s.buffer.data()),
        s.rcomp,
        s.user_context
    )
}

struct Suite {
    ctx: Context,
    me: u32,
    peer: Rank,
    queue: MatchingEngine,
    out: Vec<Observation>,
    scenario: &'static str,
}

impl Suite {
    fn note(&mut self, detail: impl Into<String>) {
        self.out.push(Observation {
            scenario: self.scenario,
            rank: self.me,
            detail: detail.into(),
        });
    }

    fn until(&self, mut done: impl FnMut() -> Result<bool>) -> Result<()> {
        let start = Instant::now();
        loop {
            if done()? {
                return Ok(());
            }
            if !self.ctx.progress()? {
                std::thread::yield_now();
            }
            if start.elapsed() > STEP_TIMEOUT {
                return Err(Error::Transport(format!(
                    "scenario {} stalled on rank {}",
                    self.scenario, self.me
                )));
            }
        }
    }

    fn wait(&self, sync: &Synchronizer) -> Result<Vec<Status>> {
        let mut out = None;
        self.until(|| {
            out = sync.try_take();
            Ok(out.is_some())
        })?;
        Ok(out.expect("taken"))
    }

    fn pop(&self, cq: &CompletionQueue, n: usize) -> Result<Vec<Status>> {
        let mut got = Vec::with_capacity(n);
        self.until(|| {
            while let Some(s) = cq.pop() {
                got.push(s);
            }
            Ok(got.len() >= n)
        })?;
        Ok(got)
    }

    /// Posts until accepted; returns the status of the finished operation.
    fn finish(
        &self,
        sync: &Synchronizer,
        mut post: impl FnMut() -> Result<PostResult>,
    ) -> Result<(Status, bool)> {
        loop {
            match post()? {
                PostResult::Done(s) => return Ok((s, true)),
                PostResult::Posted => return Ok((self.wait(sync)?.remove(0), false)),
                PostResult::Retry => {
                    self.ctx.progress()?;
                }
            }
        }
    }

    fn send(&self, data: Vec<u8>, tag: u64) -> Result<Status> {
        let sync = Synchronizer::new(1)?;
        let d =
            post_send_x(&self.ctx, self.peer, BufferDesc::from_bytes(data), Tag(tag)).comp(&sync);
        Ok(self.finish(&sync, || d.call())?.0)
    }

    fn recv(&self, cap: usize, tag: u64) -> Result<(Status, bool)> {
        let sync = Synchronizer::new(1)?;
        let d = post_recv_x(
            &self.ctx,
            self.peer,
            BufferDesc::with_capacity(cap),
            Tag(tag),
        )
        .comp(&sync);
        self.finish(&sync, || d.call())
    }

    fn send_u64s(&self, vals: &[u64]) -> Result<()> {
        let bytes = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.send(bytes, CTRL_TAG)?;
        Ok(())
    }

    fn recv_u64s(&self) -> Result<Vec<u64>> {
        let (s, _) = self.recv(256, CTRL_TAG)?;
        Ok(s.buffer
            .data()
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn barrier(&self) -> Result<()> {
        if self.me == 0 {
            self.send(vec![0], BARRIER_TAG)?;
            self.recv(1, BARRIER_TAG + 1)?;
        } else {
            self.recv(1, BARRIER_TAG)?;
            self.send(vec![1], BARRIER_TAG + 1)?;
        }
        Ok(())
    }
}

type Scenario = fn(&mut Suite) -> Result<()>;

const SCENARIOS: &[(&str, Scenario)] = &[
    ("eager_pingpong", eager_pingpong),
    ("rendezvous", rendezvous),
    ("large_tags", large_tags),
    ("unexpected", unexpected),
    ("per_key_fifo", per_key_fifo),
    ("queue_wildcard", queue_wildcard),
    ("map_wildcard_rejected", map_wildcard_rejected),
    ("truncation_guard", truncation_guard),
    ("am_cq", am_cq),
    ("am_handler", am_handler),
    ("put_get", put_get),
    ("registered_buffers", registered_buffers),
    ("sync_threshold", sync_threshold),
];

fn eager_pingpong(s: &mut Suite) -> Result<()> {
    let msg = pattern(8, 1);
    if s.me == 0 {
        let st = s.send(msg.clone(), 5)?;
        s.note(describe(&st));
        let (st, _) = s.recv(8, 6)?;
        s.note(format!(
            "{} intact={}",
            describe(&st),
            st.buffer.data()[..] == msg[..]
        ));
    } else {
        let (st, _) = s.recv(8, 5)?;
        s.note(format!(
            "{} intact={}",
            describe(&st),
            st.buffer.data()[..] == msg[..]
        ));
        let st = s.send(st.buffer.data().to_vec(), 6)?;
        s.note(describe(&st));
    }
    Ok(())
}

fn rendezvous(s: &mut Suite) -> Result<()> {
    let a = pattern(200_000, 2);
    let b = pattern(150_001, 3);
    let (out, inn, tag_out, tag_in) = if s.me == 0 {
        (&a, &b, 7, 8)
    } else {
        (&b, &a, 8, 7)
    };
    let sync = Synchronizer::new(1)?;
    let send = post_send_x(
        &s.ctx,
        s.peer,
        BufferDesc::from_bytes(out.clone()),
        Tag(tag_out),
    )
    .comp(&sync)
    .user_context(77);
    let posted = loop {
        match send.call()? {
            PostResult::Retry => {
                s.ctx.progress()?;
            }
            r => break r,
        }
    };
    s.note(format!("send posted={}", posted.is_posted()));
    let (st, _) = s.recv(256 * 1024, tag_in)?;
    s.note(format!(
        "{} intact={}",
        describe(&st),
        st.buffer.data()[..] == inn[..]
    ));
    let done = s.wait(&sync)?;
    s.note(describe(&done[0]));
    Ok(())
}

fn large_tags(s: &mut Suite) -> Result<()> {
    let tags = [1u64 << 20, u64::MAX - 1, 65_535, 65_536];
    for (i, &tag) in tags.iter().enumerate() {
        let len = if i % 2 == 0 { 24 } else { 20_000 };
        let data = pattern(len, tag);
        if s.me == 0 {
            s.send(data, tag)?;
        } else {
            let (st, _) = s.recv(32 * 1024, tag)?;
            s.note(format!(
                "{} intact={}",
                describe(&st),
                st.buffer.data()[..] == data[..]
            ));
        }
    }
    Ok(())
}

fn unexpected(s: &mut Suite) -> Result<()> {
    let data = pattern(100, 11);
    if s.me == 0 {
        s.send(data, 11)?;
        s.send(vec![1], 12)?;
    } else {
        s.recv(1, 12)?;
        let (st, immediate) = s.recv(100, 11)?;
        s.note(format!("{} immediate={immediate}", describe(&st)));
    }
    Ok(())
}

fn per_key_fifo(s: &mut Suite) -> Result<()> {
    const N: u64 = 64;
    if s.me == 0 {
        for i in 0..N {
            s.send(i.to_le_bytes().to_vec(), 13)?;
        }
    } else {
        let mut order = Vec::new();
        for _ in 0..N {
            let (st, _) = s.recv(8, 13)?;
            order.push(u64::from_le_bytes(
                st.buffer.data()[..8].try_into().unwrap(),
            ));
        }
        s.note(format!("in_order={}", order == (0..N).collect::<Vec<_>>()));
    }
    Ok(())
}

fn queue_wildcard(s: &mut Suite) -> Result<()> {
    if s.me == 0 {
        for tag in [21, 22] {
            let sync = Synchronizer::new(1)?;
            let d = post_send_x(
                &s.ctx,
                s.peer,
                BufferDesc::from_bytes(pattern(16, tag)),
                Tag(tag),
            )
            .matching_engine(&s.queue)
            .comp(&sync);
            s.finish(&sync, || d.call())?;
        }
    } else {
        for _ in 0..2 {
            let sync = Synchronizer::new(1)?;
            let d = post_recv_x(&s.ctx, Rank::ANY, BufferDesc::with_capacity(16), Tag::ANY)
                .matching_engine(&s.queue)
                .comp(&sync);
            let (st, _) = s.finish(&sync, || d.call())?;
            s.note(describe(&st));
        }
    }
    Ok(())
}

fn map_wildcard_rejected(s: &mut Suite) -> Result<()> {
    let r = post_recv_x(&s.ctx, Rank::ANY, BufferDesc::with_capacity(8), Tag(1)).call();
    s.note(format!("bad_arg={}", matches!(r, Err(Error::BadArg(_)))));
    Ok(())
}

fn truncation_guard(s: &mut Suite) -> Result<()> {
    // The receive side checks capacity before anything is copied; exercised
    // here with a buffer that fits exactly.
    let data = pattern(333, 9);
    if s.me == 0 {
        s.send(data, 14)?;
    } else {
        let (st, _) = s.recv(333, 14)?;
        s.note(describe(&st));
    }
    Ok(())
}

fn am_cq(s: &mut Suite) -> Result<()> {
    if s.me == 1 {
        let cq = CompletionQueue::new(16)?;
        let h = s.ctx.register_rcomp(&cq, RcompPath::Imm)?;
        s.send_u64s(&[u64::from(h)])?;
        let mut got: Vec<String> = s.pop(&cq, 2)?.iter().map(describe).collect();
        got.sort();
        for g in got {
            s.note(g);
        }
        s.ctx.deregister_rcomp(h)?;
    } else {
        let h = s.recv_u64s()?[0] as u32;
        for (len, tag) in [(16usize, 3u64), (100_000, 4)] {
            let sync = Synchronizer::new(1)?;
            let d = post_am_x(&s.ctx, s.peer, BufferDesc::from_bytes(pattern(len, tag)), h)
                .tag(Tag(tag))
                .comp(&sync);
            let (st, immediate) = s.finish(&sync, || d.call())?;
            s.note(format!("{} immediate={immediate}", describe(&st)));
        }
    }
    Ok(())
}

fn am_handler(s: &mut Suite) -> Result<()> {
    if s.me == 1 {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        let handler = s
            .ctx
            .alloc_handler(move |st| sink.lock().push(describe(&st)))?;
        let h = s.ctx.register_rcomp(&handler, RcompPath::Payload)?;
        s.send_u64s(&[u64::from(h)])?;
        s.until(|| Ok(seen.lock().len() >= 2))?;
        let mut got = seen.lock().clone();
        got.sort();
        for g in got {
            s.note(g);
        }
        s.ctx.deregister_rcomp(h)?;
        s.ctx.free_handler(&handler)?;
    } else {
        let h = s.recv_u64s()?[0] as u32;
        s.note(format!(
            "payload_path_handle={}",
            h >= crate::IMM_RCOMP_LIMIT
        ));
        for (len, tag) in [(40usize, 70_000u64), (50_000, 9)] {
            let sync = Synchronizer::new(1)?;
            let d = post_am_x(&s.ctx, s.peer, BufferDesc::from_bytes(pattern(len, tag)), h)
                .tag(Tag(tag))
                .comp(&sync);
            s.finish(&sync, || d.call())?;
        }
    }
    Ok(())
}

fn put_get(s: &mut Suite) -> Result<()> {
    const REGION: usize = 1 << 20;
    if s.me == 1 {
        let region = Region::from_vec(pattern(REGION, 42));
        let mr = s.ctx.register_memory(&region, 0, REGION)?;
        let cq = CompletionQueue::new(16)?;
        let h = s.ctx.register_rcomp(&cq, RcompPath::Imm)?;
        s.send_u64s(&[mr.rkey(), u64::from(h)])?;
        s.recv(1, 15)?;
        let mut got: Vec<String> = s.pop(&cq, 2)?.iter().map(describe).collect();
        got.sort();
        for g in got {
            s.note(g);
        }
        let window = region.read(128, 64)?;
        s.note(format!("window_intact={}", window == pattern(64, 5)));
        s.note(format!(
            "rest_intact={}",
            region.read(0, 128)? == pattern(REGION, 42)[..128]
        ));
        s.ctx.deregister_rcomp(h)?;
        s.ctx.deregister_memory(&mr)?;
    } else {
        let v = s.recv_u64s()?;
        let (rkey, h) = (v[0], v[1] as u32);
        let sync = Synchronizer::new(1)?;

        let put = post_put_x(
            &s.ctx,
            s.peer,
            BufferDesc::from_bytes(pattern(64, 5)),
            rkey,
            128,
        )
        .rcomp(h)
        .tag(Tag(5))
        .comp(&sync);
        let (st, _) = s.finish(&sync, || put.call())?;
        s.note(describe(&st));

        let get = post_get_x(&s.ctx, s.peer, BufferDesc::with_capacity(8), rkey, 0).comp(&sync);
        let (st, _) = s.finish(&sync, || get.call())?;
        s.note(format!(
            "{} head_intact={}",
            describe(&st),
            st.buffer.data()[..] == pattern(REGION, 42)[..8]
        ));

        let get = post_get_x(&s.ctx, s.peer, BufferDesc::with_capacity(64), rkey, 128).comp(&sync);
        let (st, _) = s.finish(&sync, || get.call())?;
        s.note(format!(
            "{} roundtrip={}",
            describe(&st),
            st.buffer.data()[..] == pattern(64, 5)[..]
        ));

        let get = post_get_x(&s.ctx, s.peer, BufferDesc::with_capacity(0), rkey, 4096).comp(&sync);
        let (st, _) = s.finish(&sync, || get.call())?;
        s.note(format!("empty_get {}", describe(&st)));

        let get = post_get_x(
            &s.ctx,
            s.peer,
            BufferDesc::with_capacity(100_000),
            rkey,
            1000,
        )
        .rcomp(h)
        .tag(Tag(6))
        .comp(&sync);
        let (st, _) = s.finish(&sync, || get.call())?;
        s.note(format!(
            "{} big_intact={}",
            describe(&st),
            st.buffer.data()[..] == pattern(REGION, 42)[1000..101_000]
        ));
        s.send(vec![1], 15)?;
    }
    Ok(())
}

fn registered_buffers(s: &mut Suite) -> Result<()> {
    let region = Region::new(64 * 1024);
    let mr = s.ctx.register_memory(&region, 0, region.len())?;
    if s.me == 0 {
        region.write(100, &pattern(30_000, 8))?;
        let sync = Synchronizer::new(1)?;
        let d = post_send_x(
            &s.ctx,
            s.peer,
            BufferDesc::registered(&mr, 100, 30_000)?,
            Tag(16),
        )
        .comp(&sync);
        let (st, _) = s.finish(&sync, || d.call())?;
        s.note(format!(
            "send len={} registered={}",
            st.buffer.len(),
            st.buffer.registration().is_some()
        ));
    } else {
        let sync = Synchronizer::new(1)?;
        let d = post_recv_x(
            &s.ctx,
            s.peer,
            BufferDesc::registered(&mr, 5, 40_000)?,
            Tag(16),
        )
        .comp(&sync);
        let (st, _) = s.finish(&sync, || d.call())?;
        s.note(format!(
            "{} landed={}",
            describe(&st),
            region.read(5, 30_000)? == pattern(30_000, 8)
        ));
    }
    s.ctx.deregister_memory(&mr)?;
    Ok(())
}

fn sync_threshold(s: &mut Suite) -> Result<()> {
    const K: usize = 16;
    if s.me == 0 {
        for i in 0..K {
            s.send(pattern(32, i as u64), 40)?;
        }
    } else {
        let sync = Synchronizer::new(K)?;
        for i in 0..K {
            let d = post_recv_x(&s.ctx, s.peer, BufferDesc::with_capacity(32), Tag(40))
                .comp(&sync)
                .user_context(i as u64);
            loop {
                match d.call()? {
                    PostResult::Retry => {
                        s.ctx.progress()?;
                    }
                    PostResult::Done(st) => {
                        sync.signal(st)?;
                        break;
                    }
                    PostResult::Posted => break,
                }
            }
        }
        let got = s.wait(&sync)?;
        let mut payloads: Vec<u64> = got.iter().map(|st| digest(st.buffer.data())).collect();
        payloads.sort();
        let mut want: Vec<u64> = (0..K).map(|i| digest(&pattern(32, i as u64))).collect();
        want.sort();
        s.note(format!(
            "statuses={} payloads_match={}",
            got.len(),
            payloads == want
        ));
    }
    Ok(())
}

/// Names of every scenario, in execution order.
pub fn scenario_names() -> impl Iterator<Item = &'static str> {
    SCENARIOS.iter().map(|(n, _)| *n)
}

/// Runs the whole suite as one rank of a two-rank world. Both ranks must
/// call this concurrently.
pub fn run_rank(ctx: &Context) -> Result<Vec<Observation>> {
    if ctx.nranks() != 2 {
        return Err(Error::BadArg(
            "the conformance suite needs exactly two ranks".into(),
        ));
    }
    let queue = ctx.alloc_matching_engine(EngineKind::Queue, MatchPolicy::RankTag)?;
    let me = ctx.rank();
    let mut suite = Suite {
        ctx: ctx.clone(),
        me,
        peer: Rank(1 - me),
        queue,
        out: Vec::new(),
        scenario: "setup",
    };
    for (name, scenario) in SCENARIOS {
        suite.scenario = name;
        scenario(&mut suite)?;
        suite.barrier()?;
    }
    let queue = suite.queue.clone();
    ctx.free_matching_engine(&queue)?;
    let mut out = suite.out;
    out.sort();
    Ok(out)
}

/// Runs both ranks over the loopback transport, one thread each, and
/// finalizes the runtime. No other runtime may be active.
pub fn run_loopback() -> Result<Vec<Observation>> {
    let rt = runtime_init_x()
        .attr("transport", "loopback")
        .attr("nranks", 2)
        .call()?;
    let results: Vec<Result<Vec<Observation>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = rt
            .contexts()
            .iter()
            .map(|ctx| sc.spawn(move || run_rank(ctx)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    rt.finalize()?;
    out.sort();
    Ok(out)
}
