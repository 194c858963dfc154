//! Matching of posted receives against arrived sends.
//!
//! Two stores are provided. [`QueueStore`] keeps both sides in global
//! insertion order and supports wildcard keys; a lookup returns the earliest
//! compatible entry. [`MapStore`] shards exact keys over independent locks
//! for concurrency and returns the earliest entry within the exact key's
//! bucket. In both, an insert either stores or matches, as one step under
//! the lock that guards the key.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;
use parking_lot::Mutex;

use crate::attr::{AttrSet, AttrValue};
use crate::error::{bad_arg, Result};
use crate::transport::{RecvPost, SendArrival};
use crate::types::{MatchKey, MatchPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Queue,
    Map,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Queue => "queue",
            EngineKind::Map => "map",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "queue" => Ok(EngineKind::Queue),
            "map" => Ok(EngineKind::Map),
            other => Err(bad_arg(format!("unknown matching engine kind {other:?}"))),
        }
    }
}

/// One side of a matching operation, as accepted by [`EngineStore::insert`].
#[derive(Debug, PartialEq, Eq)]
pub enum Entry<S, R> {
    Send(S),
    Recv(R),
}

struct Side<T> {
    buckets: HashMap<MatchKey, VecDeque<(u64, T)>>,
    order: BTreeMap<u64, MatchKey>,
    concrete_rank: usize,
    concrete_tag: usize,
}

impl<T> Side<T> {
    fn new() -> Self {
        Side {
            buckets: HashMap::new(),
            order: BTreeMap::new(),
            concrete_rank: 0,
            concrete_tag: 0,
        }
    }

    fn len(&self) -> usize {
        self.order.len()
    }

    fn push(&mut self, seq: u64, key: MatchKey, item: T) {
        self.buckets.entry(key).or_default().push_back((seq, item));
        self.order.insert(seq, key);
        self.concrete_rank += usize::from(!key.rank_is_any());
        self.concrete_tag += usize::from(!key.tag_is_any());
    }

    /// Key of the bucket holding the earliest stored entry compatible with
    /// `key`.
    fn find(&self, key: &MatchKey) -> Option<MatchKey> {
        let scan = (key.rank_is_any() && self.concrete_rank > 0)
            || (key.tag_is_any() && self.concrete_tag > 0);
        if scan {
            return self.order.values().find(|k| k.compatible(key)).copied();
        }
        let ranks = if key.rank_is_any() {
            [MatchKey::ANY_RANK, MatchKey::ANY_RANK]
        } else {
            [key.rank, MatchKey::ANY_RANK]
        };
        let tags = if key.tag_is_any() {
            [MatchKey::ANY_TAG, MatchKey::ANY_TAG]
        } else {
            [key.tag, MatchKey::ANY_TAG]
        };
        let mut best: Option<(u64, MatchKey)> = None;
        for &rank in &ranks {
            for &tag in &tags {
                let cand = MatchKey { rank, tag };
                if let Some((seq, _)) = self.buckets.get(&cand).and_then(|q| q.front()) {
                    if best.is_none_or(|(s, _)| *seq < s) {
                        best = Some((*seq, cand));
                    }
                }
            }
        }
        best.map(|(_, k)| k)
    }

    fn take(&mut self, key: MatchKey) -> T {
        let bucket = self.buckets.get_mut(&key).expect("bucket for found key");
        let (seq, item) = bucket.pop_front().expect("non-empty bucket");
        if bucket.is_empty() {
            self.buckets.remove(&key);
        }
        self.order.remove(&seq);
        self.concrete_rank -= usize::from(!key.rank_is_any());
        self.concrete_tag -= usize::from(!key.tag_is_any());
        item
    }
}

struct QueueState<S, R> {
    seq: u64,
    sends: Side<S>,
    recvs: Side<R>,
}

/// In-order store: the earliest compatible entry by insertion sequence wins.
pub struct QueueStore<S, R> {
    state: Mutex<QueueState<S, R>>,
}

impl<S, R> Default for QueueStore<S, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S, R> QueueStore<S, R> {
    pub fn new() -> Self {
        QueueStore {
            state: Mutex::new(QueueState {
                seq: 0,
                sends: Side::new(),
                recvs: Side::new(),
            }),
        }
    }

    /// Stores `send`, or returns it paired with the receive it matched.
    pub fn insert_send(&self, key: MatchKey, send: S) -> Option<(S, R)> {
        let mut st = self.state.lock();
        if let Some(k) = st.recvs.find(&key) {
            return Some((send, st.recvs.take(k)));
        }
        st.seq += 1;
        let seq = st.seq;
        st.sends.push(seq, key, send);
        None
    }

    pub fn insert_recv(&self, key: MatchKey, recv: R) -> Option<(S, R)> {
        let mut st = self.state.lock();
        if let Some(k) = st.sends.find(&key) {
            return Some((st.sends.take(k), recv));
        }
        st.seq += 1;
        let seq = st.seq;
        st.recvs.push(seq, key, recv);
        None
    }

    /// `(pending_sends, pending_recvs)`.
    pub fn census(&self) -> (usize, usize) {
        let st = self.state.lock();
        (st.sends.len(), st.recvs.len())
    }
}

struct Bucket<S, R> {
    sends: VecDeque<S>,
    recvs: VecDeque<R>,
}

impl<S, R> Default for Bucket<S, R> {
    fn default() -> Self {
        Bucket {
            sends: VecDeque::new(),
            recvs: VecDeque::new(),
        }
    }
}

type Shard<S, R> = CachePadded<Mutex<HashMap<MatchKey, Bucket<S, R>>>>;

const SHARDS: usize = 64;

/// Exact-key store sharded over independent locks. Wildcard components are
/// compared literally.
pub struct MapStore<S, R> {
    shards: Box<[Shard<S, R>]>,
}

impl<S, R> Default for MapStore<S, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S, R> MapStore<S, R> {
    pub fn new() -> Self {
        MapStore {
            shards: (0..SHARDS)
                .map(|_| CachePadded::new(Mutex::new(HashMap::new())))
                .collect(),
        }
    }

    fn shard(&self, key: &MatchKey) -> &Shard<S, R> {
        let h = (u64::from(key.rank).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key.tag)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
        &self.shards[(h >> 58) as usize % SHARDS]
    }

    pub fn insert_send(&self, key: MatchKey, send: S) -> Option<(S, R)> {
        let mut shard = self.shard(&key).lock();
        let bucket = shard.entry(key).or_default();
        if let Some(r) = bucket.recvs.pop_front() {
            if bucket.recvs.is_empty() {
                shard.remove(&key);
            }
            return Some((send, r));
        }
        bucket.sends.push_back(send);
        None
    }

    pub fn insert_recv(&self, key: MatchKey, recv: R) -> Option<(S, R)> {
        let mut shard = self.shard(&key).lock();
        let bucket = shard.entry(key).or_default();
        if let Some(s) = bucket.sends.pop_front() {
            if bucket.sends.is_empty() {
                shard.remove(&key);
            }
            return Some((s, recv));
        }
        bucket.recvs.push_back(recv);
        None
    }

    pub fn census(&self) -> (usize, usize) {
        self.shards.iter().fold((0, 0), |(s, r), shard| {
            let shard = shard.lock();
            shard
                .values()
                .fold((s, r), |(s, r), b| (s + b.sends.len(), r + b.recvs.len()))
        })
    }
}

/// Either store behind one interface.
pub enum EngineStore<S, R> {
    Queue(QueueStore<S, R>),
    Map(MapStore<S, R>),
}

impl<S, R> EngineStore<S, R> {
    pub fn new(kind: EngineKind) -> Self {
        match kind {
            EngineKind::Queue => EngineStore::Queue(QueueStore::new()),
            EngineKind::Map => EngineStore::Map(MapStore::new()),
        }
    }

    pub fn kind(&self) -> EngineKind {
        match self {
            EngineStore::Queue(_) => EngineKind::Queue,
            EngineStore::Map(_) => EngineKind::Map,
        }
    }

    pub fn insert_send(&self, key: MatchKey, send: S) -> Option<(S, R)> {
        match self {
            EngineStore::Queue(q) => q.insert_send(key, send),
            EngineStore::Map(m) => m.insert_send(key, send),
        }
    }

    pub fn insert_recv(&self, key: MatchKey, recv: R) -> Option<(S, R)> {
        match self {
            EngineStore::Queue(q) => q.insert_recv(key, recv),
            EngineStore::Map(m) => m.insert_recv(key, recv),
        }
    }

    /// Stores `entry`, or removes and returns the opposite-side entry it
    /// matched.
    pub fn insert(&self, key: MatchKey, entry: Entry<S, R>) -> Option<Entry<S, R>> {
        match entry {
            Entry::Send(s) => self.insert_send(key, s).map(|(_, r)| Entry::Recv(r)),
            Entry::Recv(r) => self.insert_recv(key, r).map(|(s, _)| Entry::Send(s)),
        }
    }

    pub fn census(&self) -> (usize, usize) {
        match self {
            EngineStore::Queue(q) => q.census(),
            EngineStore::Map(m) => m.census(),
        }
    }
}

pub(crate) struct EngineInner {
    index: u8,
    policy: MatchPolicy,
    store: EngineStore<SendArrival, RecvPost>,
    attrs: AttrSet,
    freed: AtomicBool,
}

/// A matching engine resource. Devices reference engines by index, so one
/// engine can pair a receive posted on one device with a send that arrives
/// on another.
#[derive(Clone)]
pub struct MatchingEngine {
    pub(crate) inner: Arc<EngineInner>,
}

impl fmt::Debug for MatchingEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchingEngine")
            .field("index", &self.inner.index)
            .field("kind", &self.kind())
            .field("policy", &self.inner.policy)
            .finish()
    }
}

impl MatchingEngine {
    pub(crate) fn new(
        index: u8,
        kind: EngineKind,
        policy: MatchPolicy,
        mut attrs: AttrSet,
    ) -> Self {
        attrs.set("match_engine", kind.name());
        attrs.set("match_policy", policy.name());
        MatchingEngine {
            inner: Arc::new(EngineInner {
                index,
                policy,
                store: EngineStore::new(kind),
                attrs,
                freed: AtomicBool::new(false),
            }),
        }
    }

    pub fn index(&self) -> u8 {
        self.inner.index
    }

    pub fn kind(&self) -> EngineKind {
        self.inner.store.kind()
    }

    pub fn policy(&self) -> &MatchPolicy {
        &self.inner.policy
    }

    /// `(pending_sends, pending_recvs)`; exact only when no inserts race.
    pub fn census(&self) -> (usize, usize) {
        self.inner.store.census()
    }

    pub fn get_attr(&self, name: &str) -> Result<AttrValue> {
        self.inner.attrs.lookup(name)
    }

    pub fn get_attr_match_engine(&self) -> EngineKind {
        self.kind()
    }

    pub fn get_attr_match_policy(&self) -> &'static str {
        self.inner.policy.name()
    }

    pub(crate) fn store(&self) -> &EngineStore<SendArrival, RecvPost> {
        &self.inner.store
    }

    pub(crate) fn is_freed(&self) -> bool {
        self.inner.freed.load(Ordering::Acquire)
    }

    pub(crate) fn mark_freed(&self) -> bool {
        !self.inner.freed.swap(true, Ordering::AcqRel)
    }

    pub fn same(&self, other: &MatchingEngine) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}
