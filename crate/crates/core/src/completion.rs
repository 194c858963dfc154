//! Completion objects: the sinks that finished operations signal.
//!
//! Three kinds are built in. A [`CompletionQueue`] buffers statuses for
//! polling, a [`Synchronizer`] becomes ready after a fixed number of
//! signals, and a [`Handler`] runs a callback inline. Anything implementing
//! [`CompletionObject`] can be used in their place.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;
use parking_lot::Mutex;

use crate::attr::{AttrSet, AttrValue};
use crate::error::{bad_arg, Error, Result};
use crate::types::Status;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompKind {
    Cq,
    Sync,
    Handler,
    User,
}

/// The signal protocol. Implementations must tolerate concurrent calls.
pub trait CompletionObject: Send + Sync {
    fn signal(&self, status: Status) -> Result<()>;

    fn kind(&self) -> CompKind {
        CompKind::User
    }
}

/// Shared handle to any completion object.
#[derive(Clone)]
pub struct Comp(Arc<dyn CompletionObject>);

impl Comp {
    pub fn new<T: CompletionObject + 'static>(obj: T) -> Self {
        Comp(Arc::new(obj))
    }

    pub fn from_arc<T: CompletionObject + 'static>(obj: Arc<T>) -> Self {
        Comp(obj)
    }

    pub fn signal(&self, status: Status) -> Result<()> {
        self.0.signal(status)
    }

    pub fn kind(&self) -> CompKind {
        self.0.kind()
    }

    pub fn same(&self, other: &Comp) -> bool {
        std::ptr::addr_eq(Arc::as_ptr(&self.0), Arc::as_ptr(&other.0))
    }
}

impl fmt::Debug for Comp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Comp({:?})", self.kind())
    }
}

struct CqInner {
    queue: ArrayQueue<Status>,
    attrs: AttrSet,
    freed: AtomicBool,
}

impl CompletionObject for CqInner {
    fn signal(&self, status: Status) -> Result<()> {
        self.queue
            .push(status)
            .map_err(|_| Error::CqFull(self.queue.capacity()))
    }

    fn kind(&self) -> CompKind {
        CompKind::Cq
    }
}

/// Bounded multi-producer multi-consumer queue of statuses.
#[derive(Clone)]
pub struct CompletionQueue {
    inner: Arc<CqInner>,
}

impl fmt::Debug for CompletionQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionQueue")
            .field("capacity", &self.capacity())
            .field("len", &self.len())
            .finish()
    }
}

impl CompletionQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        Self::with_attrs(AttrSet::new().with("capacity", capacity))
    }

    pub(crate) fn with_attrs(attrs: AttrSet) -> Result<Self> {
        let capacity = attrs.usize("capacity");
        if capacity == 0 {
            return Err(bad_arg("completion queue capacity must be nonzero"));
        }
        Ok(CompletionQueue {
            inner: Arc::new(CqInner {
                queue: ArrayQueue::new(capacity),
                attrs,
                freed: AtomicBool::new(false),
            }),
        })
    }

    /// Removes one status without blocking.
    pub fn pop(&self) -> Option<Status> {
        self.inner.queue.pop()
    }

    pub fn len(&self) -> usize {
        self.inner.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.inner.queue.capacity()
    }

    pub fn get_attr(&self, name: &str) -> Result<AttrValue> {
        self.inner.attrs.lookup(name)
    }

    pub fn get_attr_capacity(&self) -> usize {
        self.capacity()
    }

    pub fn signal(&self, status: Status) -> Result<()> {
        self.inner.signal(status)
    }

    pub(crate) fn mark_freed(&self) -> bool {
        !self.inner.freed.swap(true, Ordering::AcqRel)
    }
}

impl From<&CompletionQueue> for Comp {
    fn from(cq: &CompletionQueue) -> Comp {
        Comp(cq.inner.clone())
    }
}

impl From<CompletionQueue> for Comp {
    fn from(cq: CompletionQueue) -> Comp {
        Comp(cq.inner)
    }
}

const TAKING: usize = usize::MAX;

struct SyncInner {
    threshold: usize,
    claimed: AtomicUsize,
    filled: AtomicUsize,
    slots: Box<[Mutex<Option<Status>>]>,
    attrs: AttrSet,
    freed: AtomicBool,
}

impl CompletionObject for SyncInner {
    fn signal(&self, status: Status) -> Result<()> {
        let slot = self.claimed.fetch_add(1, Ordering::AcqRel);
        if slot >= self.threshold {
            self.claimed.fetch_sub(1, Ordering::AcqRel);
            return Err(Error::SyncOverflow(self.threshold));
        }
        *self.slots[slot].lock() = Some(status);
        self.filled.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    fn kind(&self) -> CompKind {
        CompKind::Sync
    }
}

/// Becomes ready once `threshold` signals have arrived. A successful wait
/// hands back the stored statuses and rearms the synchronizer.
#[derive(Clone)]
pub struct Synchronizer {
    inner: Arc<SyncInner>,
}

impl fmt::Debug for Synchronizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Synchronizer")
            .field("threshold", &self.inner.threshold)
            .field("ready", &self.test())
            .finish()
    }
}

impl Synchronizer {
    pub fn new(threshold: usize) -> Result<Self> {
        Self::with_attrs(AttrSet::new().with("threshold", threshold))
    }

    pub(crate) fn with_attrs(attrs: AttrSet) -> Result<Self> {
        let threshold = attrs.usize("threshold");
        if threshold == 0 {
            return Err(bad_arg("synchronizer threshold must be nonzero"));
        }
        Ok(Synchronizer {
            inner: Arc::new(SyncInner {
                threshold,
                claimed: AtomicUsize::new(0),
                filled: AtomicUsize::new(0),
                slots: (0..threshold).map(|_| Mutex::new(None)).collect(),
                attrs,
                freed: AtomicBool::new(false),
            }),
        })
    }

    pub fn threshold(&self) -> usize {
        self.inner.threshold
    }

    /// Signals stored in the current epoch.
    pub fn count(&self) -> usize {
        match self.inner.filled.load(Ordering::Acquire) {
            TAKING => self.inner.threshold,
            n => n,
        }
    }

    pub fn test(&self) -> bool {
        self.inner.filled.load(Ordering::Acquire) == self.inner.threshold
    }

    /// Takes the statuses if ready, rearming the synchronizer. Of several
    /// concurrent callers only one receives a given epoch.
    pub fn try_take(&self) -> Option<Vec<Status>> {
        let inner = &self.inner;
        inner
            .filled
            .compare_exchange(inner.threshold, TAKING, Ordering::AcqRel, Ordering::Acquire)
            .ok()?;
        let out = inner
            .slots
            .iter()
            .map(|s| s.lock().take().expect("filled slot"))
            .collect();
        inner.filled.store(0, Ordering::Release);
        inner.claimed.store(0, Ordering::Release);
        Some(out)
    }

    /// Spins until ready, calling `progress` between checks, then returns
    /// the statuses of this epoch. Statuses are returned in slot order, which
    /// need not match signal order.
    pub fn wait_with<F: FnMut()>(&self, mut progress: F) -> Vec<Status> {
        loop {
            if let Some(out) = self.try_take() {
                return out;
            }
            progress();
        }
    }

    pub fn wait(&self) -> Vec<Status> {
        self.wait_with(std::hint::spin_loop)
    }

    pub fn get_attr(&self, name: &str) -> Result<AttrValue> {
        self.inner.attrs.lookup(name)
    }

    pub fn get_attr_threshold(&self) -> usize {
        self.inner.threshold
    }

    pub fn signal(&self, status: Status) -> Result<()> {
        self.inner.signal(status)
    }

    pub(crate) fn mark_freed(&self) -> bool {
        !self.inner.freed.swap(true, Ordering::AcqRel)
    }
}

impl From<&Synchronizer> for Comp {
    fn from(s: &Synchronizer) -> Comp {
        Comp(s.inner.clone())
    }
}

impl From<Synchronizer> for Comp {
    fn from(s: Synchronizer) -> Comp {
        Comp(s.inner)
    }
}

type HandlerFn = dyn Fn(Status) + Send + Sync;

struct HandlerInner {
    f: Box<HandlerFn>,
}

impl CompletionObject for HandlerInner {
    fn signal(&self, status: Status) -> Result<()> {
        (self.f)(status);
        Ok(())
    }

    fn kind(&self) -> CompKind {
        CompKind::Handler
    }
}

/// Runs a callback on the thread that delivers each completion, either
/// inside progress or inside a post that completes immediately. The callback
/// must not block waiting for other completions.
#[derive(Clone)]
pub struct Handler {
    inner: Arc<HandlerInner>,
}

impl fmt::Debug for Handler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Handler")
    }
}

impl Handler {
    pub fn new(f: impl Fn(Status) + Send + Sync + 'static) -> Self {
        Handler {
            inner: Arc::new(HandlerInner { f: Box::new(f) }),
        }
    }

    pub fn signal(&self, status: Status) -> Result<()> {
        self.inner.signal(status)
    }
}

impl From<&Handler> for Comp {
    fn from(h: &Handler) -> Comp {
        Comp(h.inner.clone())
    }
}

impl From<Handler> for Comp {
    fn from(h: Handler) -> Comp {
        Comp(h.inner)
    }
}

impl From<&Comp> for Comp {
    fn from(c: &Comp) -> Comp {
        c.clone()
    }
}
