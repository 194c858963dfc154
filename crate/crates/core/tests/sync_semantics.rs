use std::sync::{Arc, Barrier};

use lci::{
    BufferDesc, Comp, CompletionObject, CompletionQueue, ErrorCode, Handler, OpKind, Rank, Status,
    Synchronizer, Tag,
};

const THREADS: usize = 8;

fn status(id: u64) -> Status {
    Status {
        op: OpKind::Send,
        peer: Rank(0),
        tag: Tag(0),
        buffer: BufferDesc::from_bytes(Vec::new()),
        user_context: id,
        rcomp: 0,
        error: ErrorCode::Ok,
    }
}

/// Eight threads share `k - 1` signals, then one more arrives: the
/// synchronizer must flip exactly on that last one.
fn epoch(sync: &Synchronizer, k: usize, epoch: u64) {
    let barrier = Arc::new(Barrier::new(THREADS + 1));
    std::thread::scope(|s| {
        for t in 0..THREADS {
            let barrier = barrier.clone();
            s.spawn(move || {
                for i in (t..k - 1).step_by(THREADS) {
                    sync.signal(status(epoch << 32 | i as u64)).unwrap();
                    assert!(!sync.test());
                }
                barrier.wait();
            });
        }
        barrier.wait();
    });
    assert_eq!(sync.count(), k - 1);
    assert!(!sync.test(), "ready before the last signal (k={k})");
    assert!(sync.try_take().is_none());
    sync.signal(status(epoch << 32 | (k - 1) as u64)).unwrap();
    assert!(sync.test());
    let mut ids: Vec<u64> = sync.wait().iter().map(|s| s.user_context).collect();
    ids.sort();
    assert_eq!(
        ids,
        (0..k as u64).map(|i| epoch << 32 | i).collect::<Vec<_>>()
    );
    assert!(!sync.test());
    assert_eq!(sync.count(), 0);
}

#[test]
fn ready_exactly_at_threshold_across_epochs() {
    for k in [1, 2, 16, 1024] {
        let sync = Synchronizer::new(k).unwrap();
        for e in 0..100 {
            epoch(&sync, k, e);
        }
    }
}

#[test]
fn concurrent_signalers_fill_every_slot_once() {
    let k = 1024;
    let sync = Synchronizer::new(k).unwrap();
    for e in 0..100u64 {
        std::thread::scope(|s| {
            for t in 0..THREADS {
                let sync = &sync;
                s.spawn(move || {
                    for i in (t..k).step_by(THREADS) {
                        sync.signal(status(e << 32 | i as u64)).unwrap();
                    }
                });
            }
        });
        let got = sync.wait();
        let mut ids: Vec<u64> = got.iter().map(|s| s.user_context).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), k);
    }
}

#[test]
fn signaling_past_the_threshold_is_fatal() {
    let sync = Synchronizer::new(2).unwrap();
    sync.signal(status(0)).unwrap();
    sync.signal(status(1)).unwrap();
    assert!(sync.signal(status(2)).is_err());
}

#[test]
fn only_one_waiter_gets_each_epoch() {
    let sync = Synchronizer::new(1).unwrap();
    sync.signal(status(5)).unwrap();
    let winners: usize = std::thread::scope(|s| {
        let hs: Vec<_> = (0..THREADS)
            .map(|_| s.spawn(|| sync.try_take().is_some() as usize))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).sum()
    });
    assert_eq!(winners, 1);
}

#[test]
fn cq_preserves_each_producers_order() {
    const PER: u64 = 10_000;
    let cq = CompletionQueue::new(THREADS * PER as usize).unwrap();
    std::thread::scope(|s| {
        for t in 0..THREADS as u64 {
            let cq = &cq;
            s.spawn(move || {
                for i in 0..PER {
                    cq.signal(status(t << 32 | i)).unwrap();
                }
            });
        }
    });
    let mut next = [0u64; THREADS];
    while let Some(s) = cq.pop() {
        let (t, i) = (
            (s.user_context >> 32) as usize,
            s.user_context & 0xFFFF_FFFF,
        );
        assert_eq!(i, next[t]);
        next[t] += 1;
    }
    assert!(next.iter().all(|&n| n == PER));
}

struct Counter(std::sync::atomic::AtomicUsize);

impl CompletionObject for Counter {
    fn signal(&self, _status: Status) -> lci::Result<()> {
        self.0.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Ok(())
    }
}

#[test]
fn user_objects_and_handlers_see_every_signal() {
    let counter = Arc::new(Counter(Default::default()));
    let comp = Comp::from_arc(counter.clone());
    let seen = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let s2 = seen.clone();
    let handler = Handler::new(move |_| {
        s2.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    });
    std::thread::scope(|s| {
        for _ in 0..THREADS {
            s.spawn(|| {
                for i in 0..1000 {
                    comp.signal(status(i)).unwrap();
                    handler.signal(status(i)).unwrap();
                }
            });
        }
    });
    assert_eq!(
        counter.0.load(std::sync::atomic::Ordering::Relaxed),
        THREADS * 1000
    );
    assert_eq!(
        seen.load(std::sync::atomic::Ordering::Relaxed),
        THREADS * 1000
    );
}
