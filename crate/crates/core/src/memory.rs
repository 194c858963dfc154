//! Registered memory for one-sided put/get.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{bad_arg, Error, Result};

/// A block of memory that can be exposed to remote put/get through a
/// [`MemoryRegistration`].
#[derive(Clone, Debug)]
pub struct Region {
    bytes: Arc<RwLock<Box<[u8]>>>,
}

impl Region {
    pub fn new(len: usize) -> Self {
        Self::from_vec(vec![0; len])
    }

    pub fn from_vec(v: Vec<u8>) -> Self {
        Region {
            bytes: Arc::new(RwLock::new(v.into_boxed_slice())),
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.bytes.read().to_vec()
    }

    pub fn read(&self, offset: usize, len: usize) -> Result<Vec<u8>> {
        let guard = self.bytes.read();
        let end = checked_end(offset, len, guard.len())?;
        Ok(guard[offset..end].to_vec())
    }

    pub fn write(&self, offset: usize, data: &[u8]) -> Result<()> {
        let mut guard = self.bytes.write();
        let end = checked_end(offset, data.len(), guard.len())?;
        guard[offset..end].copy_from_slice(data);
        Ok(())
    }

    fn same(&self, other: &Region) -> bool {
        Arc::ptr_eq(&self.bytes, &other.bytes)
    }
}

fn checked_end(offset: usize, len: usize, size: usize) -> Result<usize> {
    match offset.checked_add(len) {
        Some(end) if end <= size => Ok(end),
        _ => Err(Error::OutOfBounds {
            offset: offset as u64,
            len: len as u64,
            size: size as u64,
        }),
    }
}

#[derive(Debug)]
struct RegInner {
    rkey: u64,
    device: u32,
    region: Region,
    base: usize,
    length: usize,
    refcount: AtomicUsize,
    live: AtomicBool,
}

/// A window `[base, base + length)` of a [`Region`] addressable remotely as
/// `(rkey, offset)`.
#[derive(Clone, Debug)]
pub struct MemoryRegistration {
    inner: Arc<RegInner>,
}

impl MemoryRegistration {
    pub fn rkey(&self) -> u64 {
        self.inner.rkey
    }

    pub fn len(&self) -> usize {
        self.inner.length
    }

    pub fn is_empty(&self) -> bool {
        self.inner.length == 0
    }

    pub fn base(&self) -> usize {
        self.inner.base
    }

    pub fn region(&self) -> &Region {
        &self.inner.region
    }

    pub fn device_index(&self) -> u32 {
        self.inner.device
    }

    pub fn is_registered(&self) -> bool {
        self.inner.live.load(Ordering::Acquire)
    }

    /// Operations currently holding this registration.
    pub fn in_flight(&self) -> usize {
        self.inner.refcount.load(Ordering::Acquire)
    }

    /// Reads `len` bytes at `offset` relative to the registration base.
    pub fn read(&self, offset: usize, len: usize) -> Result<Vec<u8>> {
        let end = checked_end(offset, len, self.inner.length)?;
        self.inner
            .region
            .read(self.inner.base + offset, end - offset)
    }

    pub fn write(&self, offset: usize, data: &[u8]) -> Result<()> {
        checked_end(offset, data.len(), self.inner.length)?;
        self.inner.region.write(self.inner.base + offset, data)
    }

    pub(crate) fn acquire(&self) -> Result<RegistrationUse> {
        if !self.is_registered() {
            return Err(bad_arg(format!(
                "registration {:#x} is no longer registered",
                self.rkey()
            )));
        }
        self.inner.refcount.fetch_add(1, Ordering::AcqRel);
        Ok(RegistrationUse(self.clone()))
    }

    pub fn same_region(&self, other: &MemoryRegistration) -> bool {
        self.inner.region.same(&other.inner.region)
    }
}

/// Held by an in-flight operation; releases the refcount on drop.
#[derive(Debug)]
pub(crate) struct RegistrationUse(MemoryRegistration);

impl Drop for RegistrationUse {
    fn drop(&mut self) {
        self.0.inner.refcount.fetch_sub(1, Ordering::AcqRel);
    }
}

/// Per-rank rkey table consulted by incoming put/get.
#[derive(Debug)]
pub(crate) struct MemoryTable {
    next_rkey: AtomicU64,
    entries: RwLock<HashMap<u64, MemoryRegistration>>,
}

impl MemoryTable {
    pub(crate) fn new(rank: u32) -> Self {
        MemoryTable {
            // Distinct starting points per rank make misrouted rkeys obvious.
            next_rkey: AtomicU64::new((u64::from(rank) << 48) | 0x1000),
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub(crate) fn register(
        &self,
        device: u32,
        region: &Region,
        base: usize,
        length: usize,
    ) -> Result<MemoryRegistration> {
        if length == 0 {
            return Err(bad_arg("cannot register a zero-length window"));
        }
        checked_end(base, length, region.len()).map_err(|_| {
            bad_arg(format!(
                "window [{base}, +{length}) exceeds a {}-byte region",
                region.len()
            ))
        })?;
        let rkey = self.next_rkey.fetch_add(1, Ordering::Relaxed);
        let mr = MemoryRegistration {
            inner: Arc::new(RegInner {
                rkey,
                device,
                region: region.clone(),
                base,
                length,
                refcount: AtomicUsize::new(0),
                live: AtomicBool::new(true),
            }),
        };
        self.entries.write().insert(rkey, mr.clone());
        Ok(mr)
    }

    pub(crate) fn deregister(&self, mr: &MemoryRegistration) -> Result<()> {
        let mut entries = self.entries.write();
        if !entries.contains_key(&mr.rkey()) {
            return Err(Error::DoubleFree(format!(
                "registration {:#x} already deregistered",
                mr.rkey()
            )));
        }
        let inflight = mr.in_flight();
        if inflight > 0 {
            return Err(Error::InUse(format!(
                "registration {:#x} has {inflight} operations in flight",
                mr.rkey()
            )));
        }
        mr.inner.live.store(false, Ordering::Release);
        entries.remove(&mr.rkey());
        Ok(())
    }

    pub(crate) fn lookup(&self, rkey: u64) -> Result<MemoryRegistration> {
        self.entries
            .read()
            .get(&rkey)
            .cloned()
            .ok_or(Error::BadRkey(rkey))
    }

    pub(crate) fn len(&self) -> usize {
        self.entries.read().len()
    }
}
