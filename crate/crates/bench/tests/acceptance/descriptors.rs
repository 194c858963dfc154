use anyhow::{bail, ensure, Result};
use itertools::Itertools;
use lci::*;

use crate::common::{drive, loopback_with, pattern, pop_n, post, wait};

type Setter<'a, D> = Box<dyn Fn(D) -> D + 'a>;

/// Every ordering of `setters` applied to a fresh descriptor.
fn orderings<'a, D: 'a>(
    mk: &'a dyn Fn() -> D,
    setters: &'a [Setter<'a, D>],
) -> impl Iterator<Item = D> + 'a {
    (0..setters.len())
        .permutations(setters.len())
        .map(move |order| order.into_iter().fold(mk(), |d, i| setters[i](d)))
}

fn summary(s: &Status) -> String {
    format!(
        "{} peer={} tag={} ctx={} rcomp={} err={:?} data={:?}",
        s.op.name(),
        s.peer,
        s.tag,
        s.user_context,
        s.rcomp,
        s.error,
        &s.buffer.data()[..]
    )
}

fn local(rt: &Runtime, r: PostResult, cq: &CompletionQueue) -> Result<String> {
    Ok(match r {
        PostResult::Done(s) => format!("done {} cq_len={}", summary(&s), cq.len()),
        PostResult::Posted => format!("signaled {}", summary(&pop_n(rt, cq, 1)?[0])),
        PostResult::Retry => bail!("unexpected retry"),
    })
}

fn uniform(op: &str, outcomes: Result<Vec<String>>, min: usize) -> Result<usize> {
    let outcomes = outcomes?;
    ensure!(
        outcomes.len() >= min,
        "{op}: only {} orderings",
        outcomes.len()
    );
    ensure!(
        outcomes.iter().all_equal(),
        "{op}: setter order changed behavior: {:?}",
        outcomes.iter().unique().collect::<Vec<_>>()
    );
    Ok(outcomes.len())
}

struct World {
    rt: Runtime,
    a: Context,
    b: Context,
    dev_a: Device,
    dev_b: Device,
    q_a: MatchingEngine,
    q_b: MatchingEngine,
    cq_a: CompletionQueue,
    cq_b: CompletionQueue,
    rcomp: u32,
    mr: MemoryRegistration,
    _region: Region,
}

fn world() -> Result<World> {
    let rt = loopback_with(2, &[])?;
    let (a, b) = (rt.context(0)?, rt.context(1)?);
    let dev_a = a.alloc_device()?;
    let dev_b = b.alloc_device()?;
    let q_a = a.alloc_matching_engine(EngineKind::Queue, MatchPolicy::RankTag)?;
    let q_b = b.alloc_matching_engine(EngineKind::Queue, MatchPolicy::RankTag)?;
    let cq_a = a.alloc_cq()?;
    let cq_b = b.alloc_cq()?;
    let rcomp = b.register_rcomp(&cq_b, RcompPath::Imm)?;
    let region = Region::from_vec(pattern(4096, 1));
    let mr = dev_b.register_memory(&region, 0, 4096)?;
    Ok(World {
        rt,
        a,
        b,
        dev_a,
        dev_b,
        q_a,
        q_b,
        cq_a,
        cq_b,
        rcomp,
        mr,
        _region: region,
    })
}

fn permutations(w: &World) -> Result<Vec<usize>> {
    let mut counts = Vec::new();

    let mk = || {
        post_send_x(
            &w.a,
            Rank(1),
            BufferDesc::from_bytes(pattern(24, 2)),
            Tag(3),
        )
    };
    let setters: Vec<Setter<PostSend>> = vec![
        Box::new(|d| d.device(&w.dev_a)),
        Box::new(|d| d.comp(&w.cq_a)),
        Box::new(|d| d.user_context(42)),
        Box::new(|d| d.matching_engine(&w.q_a)),
    ];
    let outcomes = orderings(&mk, &setters)
        .map(|d| {
            let sync = Synchronizer::new(1)?;
            post_recv_x(&w.b, Rank(0), BufferDesc::with_capacity(24), Tag(3))
                .matching_engine(&w.q_b)
                .device(&w.dev_b)
                .comp(&sync)
                .call()?;
            let l = local(&w.rt, d.call()?, &w.cq_a)?;
            Ok(format!("{l} | {}", summary(&wait(&w.rt, &sync)?[0])))
        })
        .collect();
    counts.push(uniform("send", outcomes, 24)?);

    let mk = || post_recv_x(&w.b, Rank(0), BufferDesc::with_capacity(24), Tag(4));
    let setters: Vec<Setter<PostRecv>> = vec![
        Box::new(|d| d.device(&w.dev_b)),
        Box::new(|d| d.comp(&w.cq_b)),
        Box::new(|d| d.user_context(7)),
        Box::new(|d| d.matching_engine(&w.q_b)),
    ];
    let outcomes = orderings(&mk, &setters)
        .map(|d| {
            let r = d.call()?;
            ensure!(r.is_posted(), "receive matched nothing yet completed");
            post_send_x(
                &w.a,
                Rank(1),
                BufferDesc::from_bytes(pattern(24, 5)),
                Tag(4),
            )
            .matching_engine(&w.q_a)
            .device(&w.dev_a)
            .call()?;
            local(&w.rt, r, &w.cq_b)
        })
        .collect();
    counts.push(uniform("recv", outcomes, 24)?);

    let mk = || {
        post_am_x(
            &w.a,
            Rank(1),
            BufferDesc::from_bytes(pattern(12, 6)),
            w.rcomp,
        )
    };
    let setters: Vec<Setter<PostAm>> = vec![
        Box::new(|d| d.device(&w.dev_a)),
        Box::new(|d| d.comp(&w.cq_a)),
        Box::new(|d| d.user_context(9)),
        Box::new(|d| d.tag(Tag(11))),
    ];
    let outcomes = orderings(&mk, &setters)
        .map(|d| {
            let l = local(&w.rt, d.call()?, &w.cq_a)?;
            Ok(format!("{l} | {}", summary(&pop_n(&w.rt, &w.cq_b, 1)?[0])))
        })
        .collect();
    counts.push(uniform("am", outcomes, 24)?);

    let remote = |w: &World| -> Result<String> {
        let s = pop_n(&w.rt, &w.cq_b, 1)?.remove(0);
        Ok(format!("{} {} {}", s.op.name(), s.tag, s.rcomp))
    };
    let data = pattern(16, 8);
    let mk = || {
        post_put_x(
            &w.a,
            Rank(1),
            BufferDesc::from_bytes(data.clone()),
            w.mr.rkey(),
            64,
        )
    };
    let setters: Vec<Setter<PostPut>> = vec![
        Box::new(|d| d.device(&w.dev_a)),
        Box::new(|d| d.comp(&w.cq_a)),
        Box::new(|d| d.user_context(13)),
        Box::new(|d| d.tag(Tag(2))),
        Box::new(|d| d.rcomp(w.rcomp)),
    ];
    let outcomes = orderings(&mk, &setters)
        .map(|d| {
            Ok(format!(
                "{} | {}",
                local(&w.rt, d.call()?, &w.cq_a)?,
                remote(w)?
            ))
        })
        .collect();
    counts.push(uniform("put", outcomes, 120)?);

    let mk = || {
        post_get_x(
            &w.a,
            Rank(1),
            BufferDesc::with_capacity(16),
            w.mr.rkey(),
            32,
        )
    };
    let setters: Vec<Setter<PostGet>> = vec![
        Box::new(|d| d.device(&w.dev_a)),
        Box::new(|d| d.comp(&w.cq_a)),
        Box::new(|d| d.user_context(14)),
        Box::new(|d| d.tag(Tag(1))),
        Box::new(|d| d.rcomp(w.rcomp)),
    ];
    let outcomes = orderings(&mk, &setters)
        .map(|d| {
            Ok(format!(
                "{} | {}",
                local(&w.rt, d.call()?, &w.cq_a)?,
                remote(w)?
            ))
        })
        .collect();
    counts.push(uniform("get", outcomes, 120)?);
    Ok(counts)
}

/// Invokes `call` until `n` operations were accepted and returns how many
/// completions were observed. Immediate completions are folded in by hand.
fn reuse(
    rt: &Runtime,
    n: usize,
    sync: &Synchronizer,
    call: impl Fn() -> lci::Result<PostResult>,
) -> Result<usize> {
    for _ in 0..n {
        if let PostResult::Done(s) = post(rt, &call)? {
            sync.signal(s)?;
        }
    }
    Ok(wait(rt, sync)?.len())
}

fn reused(w: &World) -> Result<()> {
    const N: usize = 100;
    let rsync = Synchronizer::new(N)?;
    let recv = post_recv_x(&w.b, Rank(0), BufferDesc::with_capacity(8), Tag(1)).comp(&rsync);
    for _ in 0..N {
        ensure!(recv.call()?.is_posted(), "receive completed with no sender");
    }
    let sync = Synchronizer::new(N)?;
    let send =
        post_send_x(&w.a, Rank(1), BufferDesc::from_bytes(pattern(8, 1)), Tag(1)).comp(&sync);
    ensure!(reuse(&w.rt, N, &sync, || send.call())? == N, "send");
    ensure!(wait(&w.rt, &rsync)?.len() == N, "recv");

    let am = post_am_x(
        &w.a,
        Rank(1),
        BufferDesc::from_bytes(pattern(8, 2)),
        w.rcomp,
    )
    .comp(&sync);
    ensure!(reuse(&w.rt, N, &sync, || am.call())? == N, "am");
    ensure!(pop_n(&w.rt, &w.cq_b, N)?.len() == N, "am deliveries");

    let put = post_put_x(
        &w.a,
        Rank(1),
        BufferDesc::from_bytes(pattern(8, 3)),
        w.mr.rkey(),
        0,
    )
    .comp(&sync);
    ensure!(reuse(&w.rt, N, &sync, || put.call())? == N, "put");

    let get = post_get_x(&w.a, Rank(1), BufferDesc::with_capacity(8), w.mr.rkey(), 0).comp(&sync);
    ensure!(reuse(&w.rt, N, &sync, || get.call())? == N, "get");

    drive(&w.rt, || {
        w.a.devices().iter().all(|d| d.outstanding() == 0)
            && w.b.devices().iter().all(|d| d.outstanding() == 0)
    })?;
    ensure!(w.cq_b.is_empty(), "stray remote completions");
    Ok(())
}

pub fn convention() -> Result<String> {
    let w = world()?;
    let counts = permutations(&w)?;
    reused(&w)?;
    w.rt.finalize()?;
    Ok(format!(
        "send/recv/am/put/get orderings {counts:?} behave identically, each op reused 100 times with 100 completions"
    ))
}
