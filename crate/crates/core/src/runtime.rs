//! The runtime singleton, per-rank contexts and resource allocation.
//!
//! With the loopback transport one runtime hosts every rank of the world as
//! a [`Context`]; with TCP it hosts only the local rank. Resources are
//! allocated through builders returned by the `alloc_*_x` methods:
//!
//! ```
//! # let _g = lci::test_lock();
//! let rt = lci::runtime_init_x().attr("nranks", 2).call().unwrap();
//! let ctx = rt.context(0).unwrap();
//! let cq = ctx.alloc_cq_x().capacity(128).call().unwrap();
//! assert_eq!(cq.capacity(), 128);
//! rt.finalize().unwrap();
//! ```

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use crate::attr::{AttrSet, AttrValue, Config, EnvSource, Scope};
use crate::completion::{Comp, CompletionQueue, Handler, Synchronizer};
use crate::error::{bad_arg, Error, Result};
use crate::matching::{EngineKind, MatchingEngine};
use crate::memory::{MemoryRegistration, Region};
use crate::packet_pool::PacketPool;
use crate::rcomp::RcompPath;
use crate::transport::{loopback, tcp, Backend, Device, RankShared, TransportKind};
use crate::types::{MatchPolicy, Rank, Status};

static ACTIVE: AtomicBool = AtomicBool::new(false);

/// Released on drop unless disarmed; keeps a failed init from leaving the
/// singleton claimed.
struct Claim(bool);

impl Drop for Claim {
    fn drop(&mut self) {
        if self.0 {
            ACTIVE.store(false, Ordering::Release);
        }
    }
}

#[derive(Clone)]
pub(crate) enum World {
    Loopback(Arc<loopback::Fabric>),
    Tcp(Arc<tcp::World>),
}

/// Starts building a runtime.
pub fn runtime_init_x() -> RuntimeInit {
    RuntimeInit {
        attrs: AttrSet::new(),
        env: EnvSource::Process,
    }
}

/// Starts a runtime configured from compiled defaults and `LCI_*` variables.
pub fn runtime_init() -> Result<Runtime> {
    runtime_init_x().call()
}

#[derive(Debug, Clone)]
pub struct RuntimeInit {
    attrs: AttrSet,
    env: EnvSource,
}

impl RuntimeInit {
    /// Sets an attribute of any scope. Values given here override the
    /// environment and become the defaults of later allocations.
    pub fn attr(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(name, value);
        self
    }

    pub fn attrs(mut self, attrs: &AttrSet) -> Self {
        for (k, v) in attrs.iter() {
            self.attrs.set(k, v.clone());
        }
        self
    }

    /// Replaces the process environment as the source of `LCI_*` values.
    pub fn env(mut self, env: EnvSource) -> Self {
        self.env = env;
        self
    }

    pub fn call(&self) -> Result<Runtime> {
        if ACTIVE
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(Error::AlreadyActive);
        }
        let mut claim = Claim(true);
        let config = Arc::new(Config::new(&self.attrs, &self.env)?);
        let attrs = config.resolve(Scope::Runtime, &AttrSet::new())?;
        let transport = TransportKind::from_name(attrs.str("transport"))?;
        let nranks = attrs.usize("nranks") as u32;
        let (world, ranks) = match transport {
            TransportKind::Loopback => {
                let depth = config
                    .resolve(Scope::Device, &AttrSet::new())?
                    .usize("outbound_queue_depth");
                (
                    World::Loopback(loopback::Fabric::new(nranks, depth)),
                    (0..nranks).collect(),
                )
            }
            TransportKind::Tcp => {
                let rank = attrs.usize("rank") as u32;
                let world = tcp::World::start(
                    rank,
                    nranks,
                    attrs.str("hosts"),
                    attrs.usize("tcp_port_base") as u16,
                    Duration::from_millis(attrs.int("connect_timeout_ms") as u64),
                )?;
                (World::Tcp(world), vec![rank])
            }
        };
        let contexts: Vec<Context> = ranks
            .into_iter()
            .map(|r| Context::new(r, nranks, config.clone(), world.clone()))
            .collect();
        let rt = Runtime {
            inner: Arc::new(RuntimeInner {
                attrs,
                transport,
                nranks,
                contexts,
                world,
                finalized: AtomicBool::new(false),
            }),
        };
        if rt.inner.attrs.bool("alloc_default_resources") {
            for ctx in &rt.inner.contexts {
                ctx.alloc_defaults()?;
            }
        }
        claim.0 = false;
        Ok(rt)
    }
}

struct RuntimeInner {
    attrs: AttrSet,
    transport: TransportKind,
    nranks: u32,
    contexts: Vec<Context>,
    world: World,
    finalized: AtomicBool,
}

/// The process-wide communication runtime. At most one is active at a time.
pub struct Runtime {
    inner: Arc<RuntimeInner>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("transport", &self.inner.transport)
            .field("nranks", &self.inner.nranks)
            .field("local_ranks", &self.inner.contexts.len())
            .finish()
    }
}

impl Runtime {
    pub fn transport(&self) -> TransportKind {
        self.inner.transport
    }

    pub fn nranks(&self) -> u32 {
        self.inner.nranks
    }

    /// The first rank hosted by this process.
    pub fn rank(&self) -> Rank {
        Rank(self.inner.contexts[0].rank())
    }

    /// Context of a rank hosted by this process.
    pub fn context(&self, rank: u32) -> Result<Context> {
        self.inner
            .contexts
            .iter()
            .find(|c| c.rank() == rank)
            .cloned()
            .ok_or_else(|| bad_arg(format!("rank {rank} is not hosted by this process")))
    }

    /// Context of the first local rank.
    pub fn local(&self) -> Context {
        self.inner.contexts[0].clone()
    }

    pub fn contexts(&self) -> &[Context] {
        &self.inner.contexts
    }

    /// Progresses every device of every local rank once.
    pub fn progress_all(&self) -> Result<bool> {
        let mut did = false;
        for ctx in &self.inner.contexts {
            did |= ctx.progress()?;
        }
        Ok(did)
    }

    pub fn get_attr(&self, name: &str) -> Result<AttrValue> {
        self.inner.attrs.lookup(name)
    }

    pub fn get_attr_nranks(&self) -> u32 {
        self.inner.nranks
    }

    pub fn get_attr_transport(&self) -> TransportKind {
        self.inner.transport
    }

    pub fn get_attr_alloc_default_resources(&self) -> bool {
        self.inner.attrs.bool("alloc_default_resources")
    }

    /// Shuts the runtime down. Fails with `InUse`, leaving everything
    /// intact, while any device still has operations or frames in flight.
    /// Over TCP this also waits for every peer to close its connections.
    pub fn finalize(&self) -> Result<()> {
        if self.inner.finalized.load(Ordering::Acquire) {
            return Err(Error::DoubleFree("runtime already finalized".into()));
        }
        for ctx in &self.inner.contexts {
            for dev in ctx.devices().iter() {
                let n = dev.outstanding();
                if n > 0 {
                    return Err(Error::InUse(format!(
                        "device {} of rank {} has {n} operations or frames outstanding",
                        dev.index(),
                        ctx.rank()
                    )));
                }
            }
        }
        if self.inner.finalized.swap(true, Ordering::AcqRel) {
            return Err(Error::DoubleFree("runtime already finalized".into()));
        }
        let mut result = Ok(());
        for ctx in &self.inner.contexts {
            ctx.inner.live.store(false, Ordering::Release);
            for dev in ctx.devices().iter() {
                if let Err(e) = dev.inner.close(ctx.timeout()) {
                    result = result.and(Err(e));
                }
            }
        }
        if let World::Tcp(w) = &self.inner.world {
            w.stop();
        }
        ACTIVE.store(false, Ordering::Release);
        result
    }

    pub fn is_finalized(&self) -> bool {
        self.inner.finalized.load(Ordering::Acquire)
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if self.inner.finalized.swap(true, Ordering::AcqRel) {
            return;
        }
        for ctx in &self.inner.contexts {
            ctx.inner.live.store(false, Ordering::Release);
            for dev in ctx.devices().iter() {
                dev.inner.abort();
            }
        }
        if let World::Tcp(w) = &self.inner.world {
            w.stop();
        }
        ACTIVE.store(false, Ordering::Release);
    }
}

/// Live resource counts of one rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Census {
    pub devices: usize,
    pub packet_pools: usize,
    pub matching_engines: usize,
    pub completion_queues: usize,
    pub synchronizers: usize,
    pub handlers: usize,
    pub rcomps: usize,
    pub registrations: usize,
}

#[derive(Default)]
struct Counts {
    pools: AtomicUsize,
    cqs: AtomicUsize,
    syncs: AtomicUsize,
    handlers: AtomicUsize,
}

#[derive(Default, Clone)]
struct Defaults {
    device: Option<Device>,
    engine: Option<MatchingEngine>,
    pool: Option<PacketPool>,
    cq: Option<CompletionQueue>,
}

pub(crate) struct ContextInner {
    pub(crate) shared: Arc<RankShared>,
    config: Arc<Config>,
    world: World,
    devices: RwLock<Arc<Vec<Device>>>,
    next_device: Mutex<u32>,
    defaults: RwLock<Defaults>,
    counts: Counts,
    pub(crate) live: AtomicBool,
}

/// One rank's view of the runtime: its resources and its defaults.
#[derive(Clone)]
pub struct Context {
    pub(crate) inner: Arc<ContextInner>,
}

impl fmt::Debug for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Context")
            .field("rank", &self.rank())
            .field("nranks", &self.nranks())
            .finish()
    }
}

impl Context {
    fn new(rank: u32, nranks: u32, config: Arc<Config>, world: World) -> Context {
        Context {
            inner: Arc::new(ContextInner {
                shared: Arc::new(RankShared::new(rank, nranks)),
                config,
                world,
                devices: RwLock::new(Arc::new(Vec::new())),
                next_device: Mutex::new(0),
                defaults: RwLock::new(Defaults::default()),
                counts: Counts::default(),
                live: AtomicBool::new(true),
            }),
        }
    }

    fn alloc_defaults(&self) -> Result<()> {
        let pool = self.alloc_packet_pool_x().call()?;
        let engine = self.alloc_matching_engine_x().call()?;
        let device = self.alloc_device_x().packet_pool(&pool).call()?;
        let cq = self.alloc_cq_x().call()?;
        *self.inner.defaults.write() = Defaults {
            device: Some(device),
            engine: Some(engine),
            pool: Some(pool),
            cq: Some(cq),
        };
        Ok(())
    }

    pub fn rank(&self) -> u32 {
        self.inner.shared.rank
    }

    pub fn nranks(&self) -> u32 {
        self.inner.shared.nranks
    }

    fn timeout(&self) -> Duration {
        match &self.inner.world {
            World::Tcp(w) => w.timeout(),
            World::Loopback(_) => Duration::from_secs(1),
        }
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        if self.inner.live.load(Ordering::Acquire) {
            Ok(())
        } else {
            Err(bad_arg("the runtime has been finalized"))
        }
    }

    /// Snapshot of the live devices in allocation order.
    pub fn devices(&self) -> Arc<Vec<Device>> {
        self.inner.devices.read().clone()
    }

    /// Progresses every device of this rank once.
    pub fn progress(&self) -> Result<bool> {
        let mut did = false;
        for dev in self.devices().iter() {
            did |= dev.progress()?;
        }
        Ok(did)
    }

    pub fn default_device(&self) -> Option<Device> {
        self.inner.defaults.read().device.clone()
    }

    pub fn default_matching_engine(&self) -> Option<MatchingEngine> {
        self.inner.defaults.read().engine.clone()
    }

    pub fn default_packet_pool(&self) -> Option<PacketPool> {
        self.inner.defaults.read().pool.clone()
    }

    pub fn default_cq(&self) -> Option<CompletionQueue> {
        self.inner.defaults.read().cq.clone()
    }

    pub fn census(&self) -> Census {
        let c = &self.inner.counts;
        Census {
            devices: self.inner.devices.read().len(),
            packet_pools: c.pools.load(Ordering::Acquire),
            matching_engines: self
                .inner
                .shared
                .engines
                .read()
                .iter()
                .filter(|e| !e.is_freed())
                .count(),
            completion_queues: c.cqs.load(Ordering::Acquire),
            synchronizers: c.syncs.load(Ordering::Acquire),
            handlers: c.handlers.load(Ordering::Acquire),
            rcomps: self.inner.shared.rcomps.len(),
            registrations: self.inner.shared.memory.len(),
        }
    }

    pub fn alloc_device_x(&self) -> AllocDevice {
        AllocDevice {
            ctx: self.clone(),
            pool: None,
            attrs: AttrSet::new(),
        }
    }

    pub fn alloc_device(&self) -> Result<Device> {
        self.alloc_device_x().call()
    }

    pub fn alloc_packet_pool_x(&self) -> AllocPacketPool {
        AllocPacketPool {
            ctx: self.clone(),
            attrs: AttrSet::new(),
        }
    }

    pub fn alloc_packet_pool(&self, count: usize, packet_size: usize) -> Result<PacketPool> {
        self.alloc_packet_pool_x()
            .count(count)
            .size(packet_size)
            .call()
    }

    pub fn alloc_matching_engine_x(&self) -> AllocMatchingEngine {
        AllocMatchingEngine {
            ctx: self.clone(),
            policy: None,
            attrs: AttrSet::new(),
        }
    }

    pub fn alloc_matching_engine(
        &self,
        kind: EngineKind,
        policy: MatchPolicy,
    ) -> Result<MatchingEngine> {
        self.alloc_matching_engine_x()
            .kind(kind)
            .policy(policy)
            .call()
    }

    pub fn alloc_cq_x(&self) -> AllocCq {
        AllocCq {
            ctx: self.clone(),
            attrs: AttrSet::new(),
        }
    }

    pub fn alloc_cq(&self) -> Result<CompletionQueue> {
        self.alloc_cq_x().call()
    }

    pub fn alloc_sync_x(&self) -> AllocSync {
        AllocSync {
            ctx: self.clone(),
            attrs: AttrSet::new(),
        }
    }

    pub fn alloc_sync(&self, threshold: usize) -> Result<Synchronizer> {
        self.alloc_sync_x().threshold(threshold).call()
    }

    pub fn alloc_handler(&self, f: impl Fn(Status) + Send + Sync + 'static) -> Result<Handler> {
        self.check_live()?;
        self.inner.counts.handlers.fetch_add(1, Ordering::AcqRel);
        Ok(Handler::new(f))
    }

    /// Frees a device. It must have nothing outstanding.
    pub fn free_device(&self, dev: &Device) -> Result<()> {
        let n = dev.outstanding();
        if n > 0 {
            return Err(Error::InUse(format!(
                "device {} has {n} operations or frames outstanding",
                dev.index()
            )));
        }
        if !dev.mark_freed() {
            return Err(Error::DoubleFree(format!(
                "device {} already freed",
                dev.index()
            )));
        }
        let mut devices = self.inner.devices.write();
        let remaining: Vec<Device> = devices.iter().filter(|d| !d.same(dev)).cloned().collect();
        *devices = Arc::new(remaining);
        drop(devices);
        let mut defaults = self.inner.defaults.write();
        if defaults.device.as_ref().is_some_and(|d| d.same(dev)) {
            defaults.device = None;
        }
        drop(defaults);
        dev.inner.abort();
        Ok(())
    }

    pub fn free_packet_pool(&self, pool: &PacketPool) -> Result<()> {
        let used = pool.in_use();
        if used > 0 {
            return Err(Error::InUse(format!("{used} packets are still held")));
        }
        if self
            .devices()
            .iter()
            .any(|d| d.packet_pool().id() == pool.id())
        {
            return Err(Error::InUse("a live device still uses this pool".into()));
        }
        let mut defaults = self.inner.defaults.write();
        if defaults.pool.as_ref().is_some_and(|p| p.id() == pool.id()) {
            defaults.pool = None;
        }
        drop(defaults);
        decrement(&self.inner.counts.pools, "packet pool")
    }

    pub fn free_matching_engine(&self, engine: &MatchingEngine) -> Result<()> {
        let (sends, recvs) = engine.census();
        if sends + recvs > 0 {
            return Err(Error::InUse(format!(
                "matching engine holds {sends} unmatched sends and {recvs} unmatched receives"
            )));
        }
        if !engine.mark_freed() {
            return Err(Error::DoubleFree(format!(
                "matching engine {} already freed",
                engine.index()
            )));
        }
        let mut defaults = self.inner.defaults.write();
        if defaults.engine.as_ref().is_some_and(|e| e.same(engine)) {
            defaults.engine = None;
        }
        Ok(())
    }

    pub fn free_cq(&self, cq: &CompletionQueue) -> Result<()> {
        if !cq.mark_freed() {
            return Err(Error::DoubleFree("completion queue already freed".into()));
        }
        let mut defaults = self.inner.defaults.write();
        if defaults
            .cq
            .as_ref()
            .is_some_and(|c| Comp::from(c).same(&Comp::from(cq)))
        {
            defaults.cq = None;
        }
        drop(defaults);
        decrement(&self.inner.counts.cqs, "completion queue")
    }

    pub fn free_sync(&self, sync: &Synchronizer) -> Result<()> {
        if !sync.mark_freed() {
            return Err(Error::DoubleFree("synchronizer already freed".into()));
        }
        decrement(&self.inner.counts.syncs, "synchronizer")
    }

    pub fn free_handler(&self, _handler: &Handler) -> Result<()> {
        decrement(&self.inner.counts.handlers, "handler")
    }

    /// Makes `comp` reachable by peers under the returned handle.
    pub fn register_rcomp(&self, comp: impl Into<Comp>, path: RcompPath) -> Result<u32> {
        self.check_live()?;
        self.inner.shared.rcomps.register(comp.into(), path)
    }

    pub fn deregister_rcomp(&self, handle: u32) -> Result<()> {
        self.inner.shared.rcomps.deregister(handle)
    }

    /// Registers `[base, base + length)` of `region` on the default device.
    pub fn register_memory(
        &self,
        region: &Region,
        base: usize,
        length: usize,
    ) -> Result<MemoryRegistration> {
        let dev = self
            .default_device()
            .ok_or_else(|| bad_arg("no default device; register through a device"))?;
        dev.register_memory(region, base, length)
    }

    pub fn deregister_memory(&self, mr: &MemoryRegistration) -> Result<()> {
        self.inner.shared.memory.deregister(mr)
    }
}

fn decrement(counter: &AtomicUsize, what: &str) -> Result<()> {
    counter
        .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| n.checked_sub(1))
        .map(|_| ())
        .map_err(|_| Error::DoubleFree(format!("no live {what} to free")))
}

pub struct AllocDevice {
    ctx: Context,
    pool: Option<PacketPool>,
    attrs: AttrSet,
}

impl AllocDevice {
    pub fn packet_pool(mut self, pool: &PacketPool) -> Self {
        self.pool = Some(pool.clone());
        self
    }

    pub fn attr(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(name, value);
        self
    }

    /// Allocates the device. Over TCP this connects to every peer, and every
    /// rank must allocate its devices in the same order.
    pub fn call(&self) -> Result<Device> {
        let ctx = &self.ctx.inner;
        self.ctx.check_live()?;
        let attrs = ctx.config.resolve(Scope::Device, &self.attrs)?;
        let runtime_transport = match &ctx.world {
            World::Loopback(_) => TransportKind::Loopback,
            World::Tcp(_) => TransportKind::Tcp,
        };
        if TransportKind::from_name(attrs.str("transport"))? != runtime_transport {
            return Err(bad_arg(format!(
                "device transport {:?} differs from the runtime's {:?}",
                attrs.str("transport"),
                runtime_transport.name()
            )));
        }
        let pool = match &self.pool {
            Some(p) => p.clone(),
            None => match self.ctx.default_packet_pool() {
                Some(p) => p,
                None => self.ctx.alloc_packet_pool_x().call()?,
            },
        };
        let mut next = ctx.next_device.lock();
        let index = *next;
        let backend = match &ctx.world {
            World::Loopback(f) => Backend::Loopback(f.endpoint(ctx.shared.rank, index)),
            World::Tcp(w) => Backend::Tcp(Box::new(
                w.connect(index, attrs.usize("outbound_queue_depth"))?,
            )),
        };
        *next += 1;
        let dev = Device::new(index, ctx.shared.clone(), pool, backend, attrs)?;
        let mut devices = ctx.devices.write();
        let mut list = devices.as_ref().clone();
        list.push(dev.clone());
        *devices = Arc::new(list);
        Ok(dev)
    }
}

pub struct AllocPacketPool {
    ctx: Context,
    attrs: AttrSet,
}

impl AllocPacketPool {
    pub fn count(self, count: usize) -> Self {
        self.attr("packet_count", count)
    }

    pub fn size(self, packet_size: usize) -> Self {
        self.attr("packet_size", packet_size)
    }

    pub fn attr(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(name, value);
        self
    }

    pub fn call(&self) -> Result<PacketPool> {
        self.ctx.check_live()?;
        let attrs = self
            .ctx
            .inner
            .config
            .resolve(Scope::PacketPool, &self.attrs)?;
        let pool = PacketPool::with_attrs(attrs)?;
        self.ctx.inner.counts.pools.fetch_add(1, Ordering::AcqRel);
        Ok(pool)
    }
}

pub struct AllocMatchingEngine {
    ctx: Context,
    policy: Option<MatchPolicy>,
    attrs: AttrSet,
}

impl AllocMatchingEngine {
    pub fn kind(self, kind: EngineKind) -> Self {
        self.attr("match_engine", kind.name())
    }

    pub fn policy(mut self, policy: MatchPolicy) -> Self {
        self.attrs.set("match_policy", policy.name());
        self.policy = Some(policy);
        self
    }

    pub fn attr(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(name, value);
        self
    }

    pub fn call(&self) -> Result<MatchingEngine> {
        let ctx = &self.ctx.inner;
        self.ctx.check_live()?;
        let attrs = ctx.config.resolve(Scope::MatchingEngine, &self.attrs)?;
        let kind = EngineKind::from_name(attrs.str("match_engine"))?;
        let policy = match (&self.policy, attrs.str("match_policy")) {
            (Some(p), name) if p.name() == name => p.clone(),
            (_, "custom") => {
                return Err(bad_arg(
                    "the custom match policy needs a key function; pass MatchPolicy::custom",
                ))
            }
            (_, name) => MatchPolicy::from_name(name)?,
        };
        let mut engines = ctx.shared.engines.write();
        let index = u8::try_from(engines.len())
            .map_err(|_| Error::Exhausted("at most 256 matching engines per rank".into()))?;
        let engine = MatchingEngine::new(index, kind, policy, attrs);
        engines.push(engine.clone());
        Ok(engine)
    }
}

pub struct AllocCq {
    ctx: Context,
    attrs: AttrSet,
}

impl AllocCq {
    pub fn capacity(self, capacity: usize) -> Self {
        self.attr("capacity", capacity)
    }

    pub fn attr(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(name, value);
        self
    }

    /// Without an explicit capacity the queue holds at least two statuses
    /// per packet of a default pool.
    pub fn call(&self) -> Result<CompletionQueue> {
        let ctx = &self.ctx.inner;
        self.ctx.check_live()?;
        let mut attrs = ctx.config.resolve(Scope::CompletionQueue, &self.attrs)?;
        if self.attrs.get("capacity").is_none() {
            let packets = ctx
                .config
                .resolve(Scope::PacketPool, &AttrSet::new())?
                .usize("packet_count");
            let cap = attrs.usize("capacity").max(2 * packets);
            attrs.set("capacity", cap);
        }
        let cq = CompletionQueue::with_attrs(attrs)?;
        ctx.counts.cqs.fetch_add(1, Ordering::AcqRel);
        Ok(cq)
    }
}

pub struct AllocSync {
    ctx: Context,
    attrs: AttrSet,
}

impl AllocSync {
    pub fn threshold(self, threshold: usize) -> Self {
        self.attr("threshold", threshold)
    }

    pub fn attr(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(name, value);
        self
    }

    pub fn call(&self) -> Result<Synchronizer> {
        let ctx = &self.ctx.inner;
        self.ctx.check_live()?;
        let attrs = ctx.config.resolve(Scope::Synchronizer, &self.attrs)?;
        let sync = Synchronizer::with_attrs(attrs)?;
        ctx.counts.syncs.fetch_add(1, Ordering::AcqRel);
        Ok(sync)
    }
}

static TEST_LOCK: Mutex<()> = parking_lot::const_mutex(());

/// Serializes code that creates runtimes. Tests in one binary run on
/// several threads but only one runtime may be active per process.
#[doc(hidden)]
pub fn test_lock() -> parking_lot::MutexGuard<'static, ()> {
    TEST_LOCK.lock()
}
