//! In-process fabric connecting the virtual ranks of one runtime.
//!
//! Every (rank, device) pair has an inbox with one bounded channel per
//! source rank. A channel is drained by at most one thread at a time, so
//! frames from one source are dispatched in the order they were pushed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;
use parking_lot::Mutex;

use super::DeviceInner;
use crate::error::Result;
use crate::frame::Frame;

pub(crate) struct Channel {
    queue: ArrayQueue<Frame>,
    consumer: Mutex<()>,
}

impl Channel {
    pub(crate) fn new(depth: usize) -> Self {
        Channel {
            queue: ArrayQueue::new(depth),
            consumer: Mutex::new(()),
        }
    }

    pub(crate) fn push(&self, frame: Frame) -> Option<Frame> {
        self.queue.push(frame).err()
    }

    /// Dispatches up to `budget` frames; skips if another thread is draining.
    pub(crate) fn drain(&self, dev: &DeviceInner, budget: usize) -> Result<usize> {
        if self.queue.is_empty() {
            return Ok(0);
        }
        let Some(_consumer) = self.consumer.try_lock() else {
            return Ok(0);
        };
        let mut n = 0;
        while n < budget {
            let Some(frame) = self.queue.pop() else {
                break;
            };
            dev.handle(frame)?;
            n += 1;
        }
        Ok(n)
    }
}

pub(crate) struct Inbox {
    channels: Box<[Channel]>,
}

pub(crate) struct Fabric {
    nranks: u32,
    depth: usize,
    inboxes: Mutex<HashMap<(u32, u32), Arc<Inbox>>>,
}

impl Fabric {
    pub(crate) fn new(nranks: u32, depth: usize) -> Arc<Fabric> {
        Arc::new(Fabric {
            nranks,
            depth,
            inboxes: Mutex::new(HashMap::new()),
        })
    }

    fn inbox(&self, rank: u32, device: u32) -> Arc<Inbox> {
        self.inboxes
            .lock()
            .entry((rank, device))
            .or_insert_with(|| {
                Arc::new(Inbox {
                    channels: (0..self.nranks).map(|_| Channel::new(self.depth)).collect(),
                })
            })
            .clone()
    }

    /// Endpoint of device `device` on `rank`. Device indices pair up across
    /// ranks: device k of one rank talks to device k of every other.
    pub(crate) fn endpoint(&self, rank: u32, device: u32) -> Endpoint {
        Endpoint {
            rank,
            inbox: self.inbox(rank, device),
            peers: (0..self.nranks).map(|r| self.inbox(r, device)).collect(),
            cursor: AtomicUsize::new(0),
        }
    }
}

pub(crate) struct Endpoint {
    rank: u32,
    inbox: Arc<Inbox>,
    peers: Box<[Arc<Inbox>]>,
    cursor: AtomicUsize,
}

impl Endpoint {
    pub(crate) fn push(&self, peer: u32, frame: Frame) -> Option<Frame> {
        self.peers[peer as usize].channels[self.rank as usize].push(frame)
    }

    pub(crate) fn poll(&self, dev: &DeviceInner, budget: usize) -> Result<usize> {
        let channels = &self.inbox.channels;
        let start = self.cursor.fetch_add(1, Ordering::Relaxed);
        let mut n = 0;
        for i in 0..channels.len() {
            if n >= budget {
                break;
            }
            n += channels[(start + i) % channels.len()].drain(dev, budget - n)?;
        }
        Ok(n)
    }
}
