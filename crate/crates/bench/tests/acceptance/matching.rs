use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use lci::{make_match_key, MapStore, MatchKey, MatchPolicy, QueueStore, Rank, Tag};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Clone, Copy)]
enum Op {
    Send { rank: u32, tag: u64 },
    Recv { rank: Rank, tag: Tag },
}

fn fits(a: u64, b: u64, any: u64) -> bool {
    a == any || b == any || a == b
}

fn compatible(x: &MatchKey, y: &MatchKey) -> bool {
    fits(
        u64::from(x.rank),
        u64::from(y.rank),
        u64::from(MatchKey::ANY_RANK),
    ) && fits(x.tag, y.tag, MatchKey::ANY_TAG)
}

/// Brute force: one list per side, scanned for the earliest compatible entry.
#[derive(Default)]
struct ListScan {
    sends: Vec<(MatchKey, usize)>,
    recvs: Vec<(MatchKey, usize)>,
}

impl ListScan {
    fn insert(&mut self, key: MatchKey, id: usize, send: bool) -> Option<(usize, usize)> {
        let (other, own) = if send {
            (&mut self.recvs, &mut self.sends)
        } else {
            (&mut self.sends, &mut self.recvs)
        };
        match other.iter().position(|(k, _)| compatible(k, &key)) {
            Some(i) => {
                let (_, peer) = other.remove(i);
                Some(if send { (id, peer) } else { (peer, id) })
            }
            None => {
                own.push((key, id));
                None
            }
        }
    }
}

struct Outcome {
    matches: BTreeSet<(usize, usize)>,
    pending: (usize, usize),
}

type Keys = Vec<(MatchKey, bool)>;

fn keys(ops: &[Op], policy: &MatchPolicy) -> Keys {
    ops.iter()
        .map(|op| match *op {
            Op::Send { rank, tag } => (make_match_key(Rank(rank), Tag(tag), policy), true),
            Op::Recv { rank, tag } => (make_match_key(rank, tag, policy), false),
        })
        .collect()
}

fn run_oracle(keys: &Keys) -> Outcome {
    let mut o = ListScan::default();
    let matches = keys
        .iter()
        .enumerate()
        .filter_map(|(id, (k, s))| o.insert(*k, id, *s))
        .collect();
    Outcome {
        matches,
        pending: (o.sends.len(), o.recvs.len()),
    }
}

fn run_queue(keys: &Keys) -> Outcome {
    let q = QueueStore::new();
    let matches = keys
        .iter()
        .enumerate()
        .filter_map(|(id, (k, s))| {
            if *s {
                q.insert_send(*k, id)
            } else {
                q.insert_recv(*k, id)
            }
        })
        .collect();
    Outcome {
        matches,
        pending: q.census(),
    }
}

fn run_map(keys: &Keys) -> Outcome {
    let m = MapStore::new();
    let matches = keys
        .iter()
        .enumerate()
        .filter_map(|(id, (k, s))| {
            if *s {
                m.insert_send(*k, id)
            } else {
                m.insert_recv(*k, id)
            }
        })
        .collect();
    Outcome {
        matches,
        pending: m.census(),
    }
}

fn workload(rng: &mut StdRng, len: usize, wildcards: bool) -> Vec<Op> {
    let ranks = rng.random_range(1..8u32);
    let tags = rng.random_range(1..32u64);
    (0..len)
        .map(|_| {
            let rank = rng.random_range(0..ranks);
            let tag = rng.random_range(0..tags);
            if rng.random_bool(0.5) {
                Op::Send { rank, tag }
            } else {
                let any_rank = wildcards && rng.random_bool(0.1);
                let any_tag = wildcards && rng.random_bool(0.1);
                Op::Recv {
                    rank: if any_rank { Rank::ANY } else { Rank(rank) },
                    tag: if any_tag { Tag::ANY } else { Tag(tag) },
                }
            }
        })
        .collect()
}

fn conserved(ops: &Keys, out: &Outcome) -> bool {
    let sends = ops.iter().filter(|(_, s)| *s).count();
    let recvs = ops.len() - sends;
    let mut seen = BTreeSet::new();
    out.matches.len() + out.pending.0 == sends
        && out.matches.len() + out.pending.1 == recvs
        && out
            .matches
            .iter()
            .all(|&(s, r)| ops[s].1 && !ops[r].1 && seen.insert(s) && seen.insert(r))
}

pub fn oracle_equivalence() -> Result<String> {
    let start = Instant::now();
    let policies = [
        MatchPolicy::RankTag,
        MatchPolicy::TagOnly,
        MatchPolicy::RankOnly,
        MatchPolicy::None,
    ];
    let mut rng = StdRng::seed_from_u64(0xacc_e97);
    let mut inserts = 0usize;
    for w in 0..1000 {
        let len = rng.random_range(1..=10_000);
        let policy = &policies[w % 4];
        let wild = keys(&workload(&mut rng, len, true), policy);
        let oracle = run_oracle(&wild);
        let queue = run_queue(&wild);
        ensure!(
            conserved(&wild, &oracle),
            "oracle conservation, workload {w}"
        );
        ensure!(conserved(&wild, &queue), "queue conservation, workload {w}");
        ensure!(
            queue.matches == oracle.matches && queue.pending == oracle.pending,
            "queue engine differs on workload {w} ({policy:?})"
        );

        let exact = keys(&workload(&mut rng, len, false), policy);
        let oracle = run_oracle(&exact);
        let queue = run_queue(&exact);
        let map = run_map(&exact);
        ensure!(conserved(&exact, &map), "map conservation, workload {w}");
        ensure!(
            map.matches == oracle.matches && map.pending == oracle.pending,
            "map engine differs on workload {w} ({policy:?})"
        );
        ensure!(
            queue.matches == map.matches,
            "engines differ on workload {w}"
        );
        inserts += 2 * len;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!(
        "1000 workloads, {inserts} inserts, 4 policies, queue/map/list-scan identical"
    ))
}
