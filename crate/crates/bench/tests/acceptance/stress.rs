use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Result};
use lci::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::common::{drive, loopback_with, pattern, pop_n, post, wait};

pub fn in_order() -> Result<String> {
    const N: u64 = 10_000;
    let rt = loopback_with(2, &[])?;
    let (a, b) = (rt.context(0)?, rt.context(1)?);
    let qa = a.alloc_matching_engine(EngineKind::Queue, MatchPolicy::None)?;
    let qb = b.alloc_matching_engine(EngineKind::Queue, MatchPolicy::None)?;
    let cq = b.alloc_cq_x().capacity(N as usize).call()?;
    for i in 0..N {
        let r = post_recv_x(&b, Rank(0), BufferDesc::with_capacity(8), Tag(0))
            .matching_engine(&qb)
            .comp(&cq)
            .user_context(i)
            .call()?;
        ensure!(r.is_posted(), "receive {i} completed before any send");
    }
    for i in 0..N {
        let d = post_send_x(
            &a,
            Rank(1),
            BufferDesc::from_bytes(i.to_le_bytes().to_vec()),
            Tag(i * 7 + 1),
        )
        .matching_engine(&qa);
        post(&rt, || d.call())?;
    }
    for s in pop_n(&rt, &cq, N as usize)? {
        let sent = u64::from_le_bytes(s.buffer.data()[..8].try_into()?);
        ensure!(
            sent == s.user_context,
            "receive {} got send {sent}",
            s.user_context
        );
    }
    rt.finalize()?;
    Ok(format!(
        "{N} sends matched {N} pre-posted receives in posting order"
    ))
}

const THREADS: usize = 8;
const OPS: usize = 10_000;
const SLOT: usize = 64 * 1024;

/// Counts completions per operation id.
struct Ledger {
    hits: Vec<AtomicU32>,
    done: AtomicUsize,
    corrupt: AtomicUsize,
}

impl Ledger {
    fn record(&self, id: u64) {
        self.hits[id as usize].fetch_add(1, Ordering::Relaxed);
        self.done.fetch_add(1, Ordering::Release);
    }
}

impl CompletionObject for Ledger {
    fn signal(&self, status: Status) -> lci::Result<()> {
        if status.op == OpKind::Recv {
            let d = status.buffer.data();
            let seq = u64::from_le_bytes(d[..8].try_into().expect("8-byte prefix"));
            if d[8..] != pattern(d.len() - 8, seq as u8)[..] {
                self.corrupt.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.record(status.user_context);
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Send,
    Recv,
    Am,
    Put,
    Get,
}

fn message(seq: u64, len: usize) -> Vec<u8> {
    let mut v = seq.to_le_bytes().to_vec();
    v.extend(pattern(len - 8, seq as u8));
    v
}

/// Returns (duplicates, losses, corrupt payloads, AM deliveries missing).
fn stress_run(seed: u64) -> Result<(usize, usize, usize, usize)> {
    let rt = loopback_with(2, &[])?;
    let ledger = Arc::new(Ledger {
        hits: (0..THREADS * OPS).map(|_| AtomicU32::new(0)).collect(),
        done: AtomicUsize::new(0),
        corrupt: AtomicUsize::new(0),
    });
    let comp = Comp::from_arc(ledger.clone());
    let mut cqs = Vec::new();
    let mut handles = Vec::new();
    let mut rkeys = Vec::new();
    let regions: Vec<Region> = (0..2).map(|_| Region::new(THREADS * SLOT)).collect();
    for (c, r) in rt.contexts().iter().zip(&regions) {
        let cq = c.alloc_cq()?;
        handles.push(c.register_rcomp(&cq, RcompPath::Imm)?);
        cqs.push(cq);
        rkeys.push(c.register_memory(r, 0, r.len())?.rkey());
    }
    let ams_sent = AtomicUsize::new(0);
    let ams_seen = AtomicUsize::new(0);

    let results: Vec<Result<()>> = std::thread::scope(|sc| {
        let workers: Vec<_> = (0..THREADS)
            .map(|t| {
                let (rt, comp, ledger, handles, rkeys, cqs) =
                    (&rt, &comp, &ledger, &handles, &rkeys, &cqs);
                let (ams_sent, ams_seen) = (&ams_sent, &ams_seen);
                sc.spawn(move || -> Result<()> {
                    let me = (t % 2) as u32;
                    let peer = Rank(1 - me);
                    let ctx = rt.context(me)?;
                    let pair = (t / 2) as u64;
                    let mut rng = StdRng::seed_from_u64(seed * 100 + t as u64);
                    let mut plan: Vec<Kind> =
                        [Kind::Send, Kind::Recv, Kind::Am, Kind::Put, Kind::Get]
                            .iter()
                            .flat_map(|&k| std::iter::repeat_n(k, OPS / 5))
                            .collect();
                    plan.shuffle(&mut rng);
                    let (send_tag, recv_tag) = if me == 0 {
                        (pair * 2, pair * 2 + 1)
                    } else {
                        (pair * 2 + 1, pair * 2)
                    };
                    let off = (t * SLOT) as u64;
                    let p = peer.0 as usize;
                    let mut sent = 0u64;
                    for (i, kind) in plan.into_iter().enumerate() {
                        let id = (t * OPS + i) as u64;
                        let len = if rng.random_bool(0.01) {
                            20_000
                        } else {
                            rng.random_range(8..=64)
                        };
                        let call = || match kind {
                            Kind::Send => post_send_x(
                                &ctx,
                                peer,
                                BufferDesc::from_bytes(message(sent, len)),
                                Tag(send_tag),
                            )
                            .comp(comp)
                            .user_context(id)
                            .call(),
                            Kind::Recv => post_recv_x(
                                &ctx,
                                peer,
                                BufferDesc::with_capacity(20_000),
                                Tag(recv_tag),
                            )
                            .comp(comp)
                            .user_context(id)
                            .call(),
                            Kind::Am => post_am_x(
                                &ctx,
                                peer,
                                BufferDesc::from_bytes(message(0, len)),
                                handles[p],
                            )
                            .comp(comp)
                            .user_context(id)
                            .call(),
                            Kind::Put => post_put_x(
                                &ctx,
                                peer,
                                BufferDesc::from_bytes(message(0, len)),
                                rkeys[p],
                                off,
                            )
                            .comp(comp)
                            .user_context(id)
                            .call(),
                            Kind::Get => post_get_x(
                                &ctx,
                                peer,
                                BufferDesc::with_capacity(len),
                                rkeys[p],
                                off,
                            )
                            .comp(comp)
                            .user_context(id)
                            .call(),
                        };
                        if let PostResult::Done(s) = post(rt, call)? {
                            ensure!(s.user_context == id, "status carries the wrong id");
                            ledger.record(id);
                        }
                        match kind {
                            Kind::Send => sent += 1,
                            Kind::Am => {
                                ams_sent.fetch_add(1, Ordering::Relaxed);
                            }
                            _ => {}
                        }
                        if i % 4 == 0 {
                            rt.progress_all()?;
                            while cqs[me as usize].pop().is_some() {
                                ams_seen.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                    let start = Instant::now();
                    while ledger.done.load(Ordering::Acquire) < THREADS * OPS {
                        if !rt.progress_all()? {
                            std::thread::yield_now();
                        }
                        if start.elapsed() > Duration::from_secs(60) {
                            bail!("completions stopped arriving");
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or_else(|_| bail!("worker panicked")))
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let count = |f: fn(u32) -> bool| {
        ledger
            .hits
            .iter()
            .filter(|h| f(h.load(Ordering::Relaxed)))
            .count()
    };
    let (dup, lost) = (count(|h| h > 1), count(|h| h == 0));
    drive(&rt, || {
        rt.contexts()
            .iter()
            .all(|c| c.devices().iter().all(|d| d.outstanding() == 0))
    })?;
    let ams = ams_seen.load(Ordering::Relaxed)
        + cqs
            .iter()
            .map(|cq| std::iter::from_fn(|| cq.pop()).count())
            .sum::<usize>();
    let am_gap = ams_sent.load(Ordering::Relaxed).abs_diff(ams);
    rt.finalize()?;
    Ok((dup, lost, ledger.corrupt.load(Ordering::Relaxed), am_gap))
}

pub fn exactly_once() -> Result<String> {
    for seed in 0..20 {
        let (dup, lost, corrupt, am_gap) = stress_run(seed)?;
        ensure!(
            (dup, lost, corrupt, am_gap) == (0, 0, 0, 0),
            "seed {seed}: {dup} duplicates, {lost} losses, {corrupt} corrupt payloads, \
             {am_gap} active messages unaccounted"
        );
    }
    Ok(format!(
        "20 seeds x {THREADS} threads x {OPS} mixed ops, 0 duplicates, 0 losses"
    ))
}

pub fn backpressure() -> Result<String> {
    let rt = loopback_with(2, &[("packet_count", 4)])?;
    let (a, b) = (rt.context(0)?, rt.context(1)?);
    let engine = b.default_matching_engine().expect("default engine");
    let descs: Vec<_> = (0..64u64)
        .map(|i| {
            post_send_x(
                &a,
                Rank(1),
                BufferDesc::from_bytes(i.to_le_bytes().to_vec()),
                Tag(i),
            )
        })
        .collect();
    let mut pending = Vec::new();
    let start = Instant::now();
    for (i, d) in descs.iter().enumerate() {
        match d.call()? {
            PostResult::Retry => pending.push(i),
            PostResult::Done(_) => {}
            PostResult::Posted => bail!("an eager send waited for a signal"),
        }
    }
    let burst = start.elapsed();
    let retried = pending.len();
    ensure!(retried > 0, "a 64-post burst never hit the 4-packet limit");
    ensure!(
        engine.census() == (0, 0),
        "a retried post left state behind"
    );

    let sync = Synchronizer::new(64)?;
    for i in 0..64u64 {
        post_recv_x(&b, Rank(0), BufferDesc::with_capacity(8), Tag(i))
            .comp(&sync)
            .call()?;
    }
    while !pending.is_empty() {
        rt.progress_all()?;
        let mut still = Vec::new();
        for i in pending {
            if descs[i].call()?.is_retry() {
                still.push(i);
            }
        }
        pending = still;
    }
    let got = wait(&rt, &sync)?;
    ensure!(
        got.iter()
            .all(|s| s.buffer.data()[..] == s.tag.0.to_le_bytes()),
        "a payload arrived under the wrong tag"
    );
    let mut tags: Vec<u64> = got.iter().map(|s| s.tag.0).collect();
    tags.sort();
    ensure!(
        tags == (0..64).collect::<Vec<_>>(),
        "lost or duplicated messages"
    );
    rt.finalize()?;
    Ok(format!(
        "{retried} of 64 posts retried in a {burst:?} burst, all 64 completed after draining"
    ))
}
