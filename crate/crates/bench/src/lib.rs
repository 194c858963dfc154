//! Multithreaded ping-pong over lci.
//!
//! Thread `i` of rank 0 exchanges round-trips with thread `i` of rank 1 on
//! tag `i`. Over loopback both ranks live in this process; over TCP each
//! process runs one rank and calls [`run_pingpong`] with its own rank.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context as _, Result};
use bytes::Bytes;
use clap::ValueEnum;
use lci::{
    post_recv_x, post_send_x, BufferDesc, CompletionQueue, Context, Device, Handler, PostResult,
    Rank, Runtime, Status, Synchronizer, Tag,
};
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

/// Tags at or above this carry end-of-run counts, never benchmark traffic.
const TALLY_TAG: u64 = 1 << 40;
const WAIT_LIMIT: Duration = Duration::from_secs(120);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Loopback,
    Tcp,
}

/// How each thread learns that its receive finished.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CompMode {
    Cq,
    Sync,
    Handler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DeviceMode {
    Shared,
    #[value(name = "per_thread", alias = "per-thread")]
    PerThread,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

macro_rules! names {
    ($($t:ty),*) => {$(
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let v = self.to_possible_value().expect("no skipped variants");
                f.write_str(v.get_name())
            }
        }
    )*};
}

names!(Transport, CompMode, DeviceMode, Format);

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub transport: Transport,
    /// This process's rank over TCP. Ignored over loopback.
    pub rank: u32,
    /// Comma-separated host list over TCP; `None` leaves the runtime default.
    pub hosts: Option<String>,
    pub port_base: Option<u16>,
    pub threads: usize,
    pub msg_size: usize,
    pub iters: u64,
    pub warmup: u64,
    pub comp: CompMode,
    pub device_mode: DeviceMode,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            transport: Transport::Loopback,
            rank: 0,
            hosts: None,
            port_base: None,
            threads: 1,
            msg_size: 8,
            iters: 100_000,
            warmup: 1000,
            comp: CompMode::Cq,
            device_mode: DeviceMode::Shared,
            reps: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.threads >= 1, "threads must be at least 1");
        ensure!(self.iters >= 1, "iters must be at least 1");
        ensure!(self.msg_size >= 1, "msg-size must be at least 1 byte");
        ensure!(self.reps >= 1, "reps must be at least 1");
        ensure!(self.rank < 2, "the benchmark runs exactly two ranks");
        ensure!(
            (self.threads as u64) < TALLY_TAG,
            "too many threads for the tag space"
        );
        Ok(())
    }
}

/// One timed repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rep {
    pub wall_time_s: f64,
    pub rate_msgs_per_s: f64,
    /// Timed messages each rank-0 thread received.
    pub per_thread_messages: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub transport: Transport,
    pub threads: usize,
    pub msg_size: usize,
    pub iters: u64,
    pub warmup: u64,
    pub comp: CompMode,
    pub device_mode: DeviceMode,
    /// Mean over repetitions.
    pub rate_msgs_per_s: f64,
    /// Sample standard deviation over repetitions, 0 for a single one.
    pub stddev: f64,
    pub reps: Vec<Rep>,
    /// Receives completed on both ranks over all repetitions, warmup included.
    pub completed_messages: u64,
}

/// The fields every output format carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub transport: Transport,
    pub threads: usize,
    pub msg_size: usize,
    pub iters: u64,
    pub comp: CompMode,
    pub device_mode: DeviceMode,
    pub rate_msgs_per_s: f64,
    pub stddev: f64,
}

pub const CSV_HEADER: &str =
    "transport,threads,msg_size,iters,comp,device_mode,rate_msgs_per_s,stddev";

impl BenchReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            transport: self.transport,
            threads: self.threads,
            msg_size: self.msg_size,
            iters: self.iters,
            comp: self.comp,
            device_mode: self.device_mode,
            rate_msgs_per_s: self.rate_msgs_per_s,
            stddev: self.stddev,
        }
    }

    pub fn total_messages(&self) -> Vec<u64> {
        self.reps
            .iter()
            .map(|r| r.per_thread_messages.iter().sum())
            .collect()
    }
}

pub fn emit_report(report: &BenchReport, format: Format) -> String {
    let r = report.row();
    match format {
        Format::Csv => format!(
            "{CSV_HEADER}\n{},{},{},{},{},{},{},{}\n",
            r.transport,
            r.threads,
            r.msg_size,
            r.iters,
            r.comp,
            r.device_mode,
            r.rate_msgs_per_s,
            r.stddev
        ),
        Format::Json => serde_json::to_string(&r).expect("plain fields serialize") + "\n",
    }
}

/// Runs the benchmark. Over TCP only rank 0 returns a report; rank 1
/// returns `None` once its side is done.
pub fn run_pingpong(cfg: &BenchConfig) -> Result<Option<BenchReport>> {
    cfg.validate()?;
    let mut init = lci::runtime_init_x().attr("nranks", 2);
    init = match cfg.transport {
        Transport::Loopback => init.attr("transport", "loopback"),
        Transport::Tcp => {
            let mut init = init
                .attr("transport", "tcp")
                .attr("rank", i64::from(cfg.rank));
            if let Some(h) = &cfg.hosts {
                init = init.attr("hosts", h.as_str());
            }
            if let Some(p) = cfg.port_base {
                init = init.attr("tcp_port_base", i64::from(p));
            }
            init
        }
    };
    let rt = init.call().context("runtime init")?;
    let result = run_on(&rt, cfg);
    if result.is_ok() {
        quiesce(&rt)?;
        rt.finalize().context("finalize")?;
    }
    result
}

fn run_on(rt: &Runtime, cfg: &BenchConfig) -> Result<Option<BenchReport>> {
    let ctxs: Vec<Context> = match cfg.transport {
        Transport::Loopback => rt.contexts().to_vec(),
        Transport::Tcp => vec![rt.local()],
    };
    let mut sides = Vec::new();
    for ctx in &ctxs {
        sides.push(Side::new(ctx, cfg)?);
    }
    let hosts_ping = ctxs.iter().any(|c| c.rank() == 0);
    let barrier = Barrier::new(cfg.threads);
    let per_thread: Vec<Result<Tally>> = std::thread::scope(|sc| {
        let handles: Vec<_> = sides
            .iter()
            .flat_map(|side| {
                side.workers
                    .iter()
                    .enumerate()
                    .map(move |(i, w)| (side, i, w))
            })
            .map(|(side, i, w)| {
                let barrier = &barrier;
                sc.spawn(move || w.run(&side.ctx, i as u64, cfg, barrier))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("worker panicked")))
            .collect()
    });
    let tallies = per_thread.into_iter().collect::<Result<Vec<_>>>()?;
    if !hosts_ping {
        return Ok(None);
    }
    let pings: Vec<&Tally> = tallies.iter().filter(|t| t.rank == 0).collect();
    let completed = pings.iter().map(|t| t.received).sum();
    let reps: Vec<Rep> = (0..cfg.reps)
        .map(|r| {
            let start = pings
                .iter()
                .map(|t| t.spans[r].0)
                .min()
                .expect("threads >= 1");
            let end = pings
                .iter()
                .map(|t| t.spans[r].1)
                .max()
                .expect("threads >= 1");
            let wall = end
                .duration_since(start)
                .as_secs_f64()
                .max(f64::MIN_POSITIVE);
            let per_thread_messages = vec![cfg.iters; cfg.threads];
            let total: u64 = per_thread_messages.iter().sum();
            Rep {
                wall_time_s: wall,
                rate_msgs_per_s: total as f64 / wall,
                per_thread_messages,
            }
        })
        .collect();
    let rates: Vec<f64> = reps.iter().map(|r| r.rate_msgs_per_s).collect();
    let stddev = if rates.len() > 1 {
        rates.iter().std_dev()
    } else {
        0.0
    };
    Ok(Some(BenchReport {
        transport: cfg.transport,
        threads: cfg.threads,
        msg_size: cfg.msg_size,
        iters: cfg.iters,
        warmup: cfg.warmup,
        comp: cfg.comp,
        device_mode: cfg.device_mode,
        rate_msgs_per_s: rates.iter().mean(),
        stddev,
        reps,
        completed_messages: completed,
    }))
}

fn quiesce(rt: &Runtime) -> Result<()> {
    let start = Instant::now();
    while rt
        .contexts()
        .iter()
        .any(|c| c.devices().iter().any(|d| d.outstanding() > 0))
    {
        if !rt.progress_all()? {
            std::thread::yield_now();
        }
        ensure!(
            start.elapsed() < WAIT_LIMIT,
            "outstanding work never drained"
        );
    }
    Ok(())
}

/// The per-thread resources of one rank.
struct Side {
    ctx: Context,
    workers: Vec<Worker>,
}

impl Side {
    fn new(ctx: &Context, cfg: &BenchConfig) -> Result<Side> {
        let shared = ctx
            .default_device()
            .context("the context has no default device")?;
        let mut workers = Vec::with_capacity(cfg.threads);
        for _ in 0..cfg.threads {
            let device = match cfg.device_mode {
                DeviceMode::Shared => shared.clone(),
                DeviceMode::PerThread => {
                    let pool = ctx.alloc_packet_pool_x().call()?;
                    ctx.alloc_device_x().packet_pool(&pool).call()?
                }
            };
            let done = match cfg.comp {
                CompMode::Cq => Done::Cq(ctx.alloc_cq()?),
                CompMode::Sync => Done::Sync(ctx.alloc_sync(1)?),
                CompMode::Handler => {
                    let slot = Arc::new(Mutex::new(None));
                    let sink = slot.clone();
                    let h = ctx.alloc_handler(move |s| {
                        let prev = sink.lock().expect("slot lock").replace(s);
                        assert!(prev.is_none(), "handler fired twice for one receive");
                    })?;
                    Done::Handler(h, slot)
                }
            };
            workers.push(Worker {
                device,
                done,
                sends: ctx.alloc_cq()?,
                pending: AtomicU64::new(0),
            });
        }
        Ok(Side {
            ctx: ctx.clone(),
            workers,
        })
    }
}

enum Done {
    Cq(CompletionQueue),
    Sync(Synchronizer),
    Handler(Handler, Arc<Mutex<Option<Status>>>),
}

impl Done {
    fn comp(&self) -> lci::Comp {
        match self {
            Done::Cq(q) => q.into(),
            Done::Sync(s) => s.into(),
            Done::Handler(h, _) => h.into(),
        }
    }

    fn take(&self) -> Option<Status> {
        match self {
            Done::Cq(q) => q.pop(),
            Done::Sync(s) => s.try_take().map(|mut v| v.remove(0)),
            Done::Handler(_, slot) => slot.lock().expect("slot lock").take(),
        }
    }
}

struct Worker {
    device: Device,
    done: Done,
    /// Completions of sends too large to finish on the spot.
    sends: CompletionQueue,
    /// Such sends not yet popped from `sends`.
    pending: AtomicU64,
}

struct Tally {
    rank: u32,
    received: u64,
    spans: Vec<(Instant, Instant)>,
}

/// Deterministic payload for message `seq` of thread `thread`.
pub fn payload(thread: u64, seq: u64, len: usize) -> Bytes {
    let seed = thread.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seq;
    (0..len)
        .map(|i| (seed.wrapping_add(i as u64).wrapping_mul(31) >> 3) as u8)
        .collect()
}

impl Worker {
    fn run(
        &self,
        ctx: &Context,
        thread: u64,
        cfg: &BenchConfig,
        barrier: &Barrier,
    ) -> Result<Tally> {
        let me = ctx.rank();
        let peer = Rank(1 - me);
        let mut tally = Tally {
            rank: me,
            received: 0,
            spans: Vec::with_capacity(cfg.reps),
        };
        let mut seq = 0u64;
        for _ in 0..cfg.reps {
            for _ in 0..cfg.warmup {
                self.round(ctx, peer, thread, seq, cfg.msg_size)?;
                seq += 1;
            }
            if me == 0 {
                barrier.wait();
            }
            let start = Instant::now();
            for _ in 0..cfg.iters {
                self.round(ctx, peer, thread, seq, cfg.msg_size)?;
                seq += 1;
            }
            tally.spans.push((start, Instant::now()));
            tally.received += cfg.warmup + cfg.iters;
        }
        // Rank 1 reports its count so rank 0 can account for both sides.
        let tally_tag = Tag(TALLY_TAG + thread);
        if me == 1 {
            let data = Bytes::copy_from_slice(&tally.received.to_le_bytes());
            self.send(ctx, peer, tally_tag, data)?;
        } else {
            let s = self.recv(ctx, peer, tally_tag, 8)?;
            let d = s.buffer.data();
            ensure!(d.len() == 8, "malformed tally from rank 1");
            tally.received += u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        }
        // A rendezvous send needs its owner's progress until the data is out.
        let start = Instant::now();
        while self.pending.load(Ordering::Relaxed) > 0 {
            self.idle()?;
            ensure!(start.elapsed() < WAIT_LIMIT, "sends never completed");
        }
        Ok(tally)
    }

    /// Rank 0 sends then receives; rank 1 receives then echoes.
    fn round(&self, ctx: &Context, peer: Rank, thread: u64, seq: u64, len: usize) -> Result<()> {
        let tag = Tag(thread);
        let expect = payload(thread, seq, len);
        if ctx.rank() == 0 {
            self.send(ctx, peer, tag, expect.clone())?;
            let s = self.recv(ctx, peer, tag, len)?;
            check(&s, &expect, thread, seq)
        } else {
            let s = self.recv(ctx, peer, tag, len)?;
            check(&s, &expect, thread, seq)?;
            self.send(ctx, peer, tag, s.buffer.into_data())
        }
    }

    fn send(&self, ctx: &Context, peer: Rank, tag: Tag, data: Bytes) -> Result<()> {
        let d = post_send_x(ctx, peer, BufferDesc::from_bytes(data), tag)
            .device(&self.device)
            .comp(&self.sends);
        if self.post(|| d.call())?.is_posted() {
            self.pending.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    fn recv(&self, ctx: &Context, peer: Rank, tag: Tag, len: usize) -> Result<Status> {
        let d = post_recv_x(ctx, peer, BufferDesc::with_capacity(len), tag)
            .device(&self.device)
            .comp(self.done.comp());
        if let PostResult::Done(s) = self.post(|| d.call())? {
            return Ok(s);
        }
        let start = Instant::now();
        loop {
            if let Some(s) = self.done.take() {
                return Ok(s);
            }
            self.idle()?;
            ensure!(
                start.elapsed() < WAIT_LIMIT,
                "receive on tag {} never completed",
                tag.0
            );
        }
    }

    fn post(&self, call: impl Fn() -> lci::Result<PostResult>) -> Result<PostResult> {
        let start = Instant::now();
        loop {
            match call()? {
                PostResult::Retry => {
                    self.idle()?;
                    ensure!(start.elapsed() < WAIT_LIMIT, "post kept asking to retry");
                }
                r => return Ok(r),
            }
        }
    }

    fn idle(&self) -> Result<()> {
        while let Some(s) = self.sends.pop() {
            ensure!(s.error == lci::ErrorCode::Ok, "send failed: {:?}", s.error);
            self.pending.fetch_sub(1, Ordering::Relaxed);
        }
        if !self.device.progress()? {
            std::thread::yield_now();
        }
        Ok(())
    }
}

fn check(s: &Status, expect: &[u8], thread: u64, seq: u64) -> Result<()> {
    ensure!(
        s.error == lci::ErrorCode::Ok,
        "thread {thread} message {seq} failed: {:?}",
        s.error
    );
    ensure!(
        s.buffer.data()[..] == *expect,
        "payload mismatch on thread {thread} message {seq}"
    );
    Ok(())
}
