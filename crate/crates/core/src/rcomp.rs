//! Remote completion handles.
//!
//! A target registers a completion object and gets back a small integer it
//! can hand to peers. Handles below `IMM_RCOMP_LIMIT` fit the immediate
//! field of a frame; larger ones travel in the header's metadata words.

use std::collections::HashMap;

use parking_lot::{Mutex, RwLock};

use crate::completion::Comp;
use crate::error::{Error, Result};
use crate::types::IMM_RCOMP_LIMIT;

/// Which handle range a registration draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcompPath {
    /// `1..IMM_RCOMP_LIMIT`; carried in immediate data.
    Imm,
    /// `IMM_RCOMP_LIMIT..=u32::MAX`; carried as full header metadata.
    Payload,
}

struct Alloc {
    next_imm: u32,
    free_imm: Vec<u32>,
    next_payload: u64,
}

pub(crate) struct RcompRegistry {
    table: RwLock<HashMap<u32, Comp>>,
    alloc: Mutex<Alloc>,
}

impl RcompRegistry {
    pub(crate) fn new() -> Self {
        RcompRegistry {
            table: RwLock::new(HashMap::new()),
            alloc: Mutex::new(Alloc {
                next_imm: 1,
                free_imm: Vec::new(),
                next_payload: u64::from(IMM_RCOMP_LIMIT),
            }),
        }
    }

    pub(crate) fn register(&self, comp: Comp, path: RcompPath) -> Result<u32> {
        let handle = {
            let mut a = self.alloc.lock();
            match path {
                RcompPath::Imm if a.next_imm < IMM_RCOMP_LIMIT => {
                    a.next_imm += 1;
                    a.next_imm - 1
                }
                // Handles are recycled only once the fresh range is spent, so
                // a stale handle keeps failing loudly for as long as possible.
                RcompPath::Imm => a.free_imm.pop().ok_or_else(|| {
                    Error::Exhausted(format!(
                        "all {} immediate remote completion handles are in use",
                        IMM_RCOMP_LIMIT - 1
                    ))
                })?,
                RcompPath::Payload if a.next_payload <= u64::from(u32::MAX) => {
                    a.next_payload += 1;
                    (a.next_payload - 1) as u32
                }
                RcompPath::Payload => {
                    return Err(Error::Exhausted("remote completion handle space".into()))
                }
            }
        };
        self.table.write().insert(handle, comp);
        Ok(handle)
    }

    pub(crate) fn deregister(&self, handle: u32) -> Result<()> {
        self.table
            .write()
            .remove(&handle)
            .ok_or(Error::UnknownRcomp(handle))?;
        if handle < IMM_RCOMP_LIMIT {
            self.alloc.lock().free_imm.push(handle);
        }
        Ok(())
    }

    pub(crate) fn lookup(&self, handle: u32) -> Result<Comp> {
        self.table
            .read()
            .get(&handle)
            .cloned()
            .ok_or(Error::UnknownRcomp(handle))
    }

    pub(crate) fn len(&self) -> usize {
        self.table.read().len()
    }
}
