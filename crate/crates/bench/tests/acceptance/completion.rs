use std::sync::Barrier;

use anyhow::{ensure, Result};
use lci::{BufferDesc, ErrorCode, OpKind, Rank, Status, Synchronizer, Tag};

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

/// Eight threads deliver `k - 1` signals between them; the synchronizer must
/// stay unready until one more arrives.
fn epoch(sync: &Synchronizer, k: usize, epoch: u64) -> Result<()> {
    let barrier = Barrier::new(THREADS);
    let early = std::sync::atomic::AtomicBool::new(false);
    std::thread::scope(|s| {
        for t in 0..THREADS {
            let (barrier, early) = (&barrier, &early);
            s.spawn(move || {
                barrier.wait();
                for i in (t..k - 1).step_by(THREADS) {
                    sync.signal(status(epoch << 32 | i as u64)).expect("signal");
                    if sync.test() {
                        early.store(true, std::sync::atomic::Ordering::Relaxed);
                    }
                }
            });
        }
    });
    ensure!(
        !early.into_inner() && !sync.test() && sync.count() == k - 1,
        "k={k} epoch {epoch}: ready before the k-th signal"
    );
    ensure!(sync.try_take().is_none(), "k={k}: taken before ready");
    sync.signal(status(epoch << 32 | (k - 1) as u64))?;
    ensure!(
        sync.test(),
        "k={k} epoch {epoch}: not ready at the k-th signal"
    );
    let mut ids: Vec<u64> = sync.wait().iter().map(|s| s.user_context).collect();
    ids.sort();
    ensure!(
        ids == (0..k as u64).map(|i| epoch << 32 | i).collect::<Vec<_>>(),
        "k={k} epoch {epoch}: wrong statuses returned"
    );
    ensure!(!sync.test() && sync.count() == 0, "k={k}: not rearmed");
    Ok(())
}

pub fn synchronizer() -> Result<String> {
    for k in [1, 2, 16, 1024] {
        let sync = Synchronizer::new(k)?;
        for e in 0..100 {
            epoch(&sync, k, e)?;
        }
    }
    Ok("k in {1, 2, 16, 1024}, 8 signaling threads, 100 epochs each".into())
}
