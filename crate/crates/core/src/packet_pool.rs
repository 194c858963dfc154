//! Bounded pool of fixed-size packets carved from one contiguous slab.
//!
//! Allocation and release go through a lock-free bounded queue of slot
//! indices, so a stalled thread never blocks another thread's alloc. Each
//! slot carries a state byte that catches double frees of raw handles.

use std::cell::UnsafeCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;

use crate::attr::AttrSet;
use crate::error::{bad_arg, Error, Result};

const FREE: u8 = 0;
const HELD: u8 = 1;

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(1);

struct PoolInner {
    id: u64,
    packet_size: usize,
    count: usize,
    slab: Box<[UnsafeCell<u8>]>,
    free: ArrayQueue<u32>,
    state: Box<[AtomicU8]>,
    attrs: AttrSet,
}

// Slots are handed out exclusively through `free`; a slot's bytes are only
// touched by the single `Packet` that owns it.
unsafe impl Sync for PoolInner {}
unsafe impl Send for PoolInner {}

impl PoolInner {
    fn slot_ptr(&self, index: u32) -> *mut u8 {
        self.slab[index as usize * self.packet_size].get()
    }

    fn release(&self, index: u32) -> Result<()> {
        let state = &self.state[index as usize];
        if state
            .compare_exchange(HELD, FREE, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(Error::DoubleFree(format!(
                "packet {index} of pool {} is already free",
                self.id
            )));
        }
        // Capacity equals the slot count, so this push cannot fail.
        let _ = self.free.push(index);
        Ok(())
    }
}

#[derive(Clone)]
pub struct PacketPool {
    inner: Arc<PoolInner>,
}

impl fmt::Debug for PacketPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PacketPool")
            .field("id", &self.inner.id)
            .field("packet_size", &self.inner.packet_size)
            .field("count", &self.inner.count)
            .field("free", &self.free_count())
            .finish()
    }
}

impl PacketPool {
    pub fn new(count: usize, packet_size: usize) -> Result<Self> {
        let attrs = AttrSet::new()
            .with("packet_count", count)
            .with("packet_size", packet_size);
        Self::with_attrs(attrs)
    }

    pub(crate) fn with_attrs(attrs: AttrSet) -> Result<Self> {
        let count = attrs.usize("packet_count");
        let packet_size = attrs.usize("packet_size");
        if count == 0 || packet_size == 0 {
            return Err(bad_arg("packet pool needs a nonzero count and size"));
        }
        if count > u32::MAX as usize {
            return Err(bad_arg("packet count exceeds the slot index range"));
        }
        let bytes: Box<[u8]> = vec![0u8; count * packet_size].into_boxed_slice();
        // SAFETY: UnsafeCell<u8> is repr(transparent) over u8.
        let slab = unsafe { Box::from_raw(Box::into_raw(bytes) as *mut [UnsafeCell<u8>]) };
        let free = ArrayQueue::new(count);
        for i in 0..count as u32 {
            let _ = free.push(i);
        }
        Ok(PacketPool {
            inner: Arc::new(PoolInner {
                id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
                packet_size,
                count,
                slab,
                free,
                state: (0..count).map(|_| AtomicU8::new(FREE)).collect(),
                attrs,
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Takes a free packet, or `None` when the pool is exhausted.
    pub fn alloc(&self) -> Option<Packet> {
        let index = self.inner.free.pop()?;
        let prev = self.inner.state[index as usize].swap(HELD, Ordering::AcqRel);
        debug_assert_eq!(prev, FREE, "free list handed out a held packet");
        Some(Packet {
            pool: self.inner.clone(),
            index,
            len: 0,
        })
    }

    /// Returns `pkt` to this pool. A packet from another pool is rejected and
    /// goes back to its owner instead.
    pub fn free(&self, pkt: Packet) -> Result<()> {
        if !Arc::ptr_eq(&pkt.pool, &self.inner) {
            return Err(bad_arg(format!(
                "packet belongs to pool {}, not pool {}",
                pkt.pool.id, self.inner.id
            )));
        }
        let raw = pkt.into_raw();
        self.free_raw(raw)
    }

    /// Releases a packet previously detached with [`Packet::into_raw`].
    pub fn free_raw(&self, raw: RawPacket) -> Result<()> {
        if raw.pool_id != self.inner.id {
            return Err(bad_arg(format!(
                "raw packet belongs to pool {}, not pool {}",
                raw.pool_id, self.inner.id
            )));
        }
        if raw.index as usize >= self.inner.count {
            return Err(bad_arg(format!("packet index {} out of range", raw.index)));
        }
        self.inner.release(raw.index)
    }

    pub fn packet_size(&self) -> usize {
        self.inner.packet_size
    }

    pub fn capacity(&self) -> usize {
        self.inner.count
    }

    pub fn free_count(&self) -> usize {
        self.inner.free.len()
    }

    pub fn in_use(&self) -> usize {
        self.inner.count - self.free_count()
    }

    /// Address range of the backing slab.
    pub fn slab_range(&self) -> std::ops::Range<usize> {
        let start = self.inner.slab.as_ptr() as usize;
        start..start + self.inner.slab.len()
    }

    pub fn get_attr(&self, name: &str) -> Result<crate::AttrValue> {
        self.inner.attrs.lookup(name)
    }

    pub fn get_attr_packet_size(&self) -> usize {
        self.inner.packet_size
    }

    pub fn get_attr_packet_count(&self) -> usize {
        self.inner.count
    }
}

/// Detached packet handle: pool id and slot index, no ownership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawPacket {
    pub pool_id: u64,
    pub index: u32,
}

/// One fixed-size buffer owned by a pool. Dropping it returns the slot.
pub struct Packet {
    pool: Arc<PoolInner>,
    index: u32,
    len: usize,
}

impl Packet {
    pub fn capacity(&self) -> usize {
        self.pool.packet_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pool_id(&self) -> u64 {
        self.pool.id
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.pool.slot_ptr(self.index)
    }

    pub fn as_slice(&self) -> &[u8] {
        // SAFETY: the slot is exclusively owned by this packet.
        unsafe { std::slice::from_raw_parts(self.pool.slot_ptr(self.index), self.len) }
    }

    /// The whole slot, regardless of the current length.
    pub fn buffer_mut(&mut self) -> &mut [u8] {
        // SAFETY: as above; `&mut self` makes the access unique.
        unsafe {
            std::slice::from_raw_parts_mut(self.pool.slot_ptr(self.index), self.pool.packet_size)
        }
    }

    pub fn set_len(&mut self, len: usize) {
        assert!(len <= self.capacity(), "packet length beyond slot size");
        self.len = len;
    }

    /// Copies `data` in and sets the length.
    pub fn fill(&mut self, data: &[u8]) {
        self.buffer_mut()[..data.len()].copy_from_slice(data);
        self.set_len(data.len());
    }

    /// Detaches the handle without returning the slot. The slot stays held
    /// until passed to [`PacketPool::free_raw`].
    pub fn into_raw(self) -> RawPacket {
        let raw = RawPacket {
            pool_id: self.pool.id,
            index: self.index,
        };
        std::mem::forget(self);
        raw
    }
}

impl AsRef<[u8]> for Packet {
    fn as_ref(&self) -> &[u8] {
        self.as_slice()
    }
}

impl Drop for Packet {
    fn drop(&mut self) {
        let _ = self.pool.release(self.index);
    }
}

impl fmt::Debug for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Packet")
            .field("pool", &self.pool.id)
            .field("index", &self.index)
            .field("len", &self.len)
            .finish()
    }
}
