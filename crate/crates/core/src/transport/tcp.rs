//! TCP backend: one connection per (peer, device) pair.
//!
//! Each rank listens on its own address. For every device index the higher
//! rank of a pair connects to the lower one and introduces itself with a
//! 16-byte preamble (`"LCIC"`, rank, device, nranks; little-endian). After
//! setup the sockets are non-blocking and only touched from progress and
//! posting calls.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_queue::ArrayQueue;
use parking_lot::{Condvar, Mutex};

use super::loopback::Channel;
use super::DeviceInner;
use crate::error::{bad_arg, Error, Result};
use crate::frame::{Frame, FrameDecoder};

const PREAMBLE_MAGIC: [u8; 4] = *b"LCIC";
const PREAMBLE_LEN: usize = 16;
const READ_CHUNK: usize = 64 * 1024;
const FLUSH_BATCH: usize = 64;

fn preamble(rank: u32, device: u32, nranks: u32) -> [u8; PREAMBLE_LEN] {
    let mut p = [0u8; PREAMBLE_LEN];
    p[..4].copy_from_slice(&PREAMBLE_MAGIC);
    p[4..8].copy_from_slice(&rank.to_le_bytes());
    p[8..12].copy_from_slice(&device.to_le_bytes());
    p[12..16].copy_from_slice(&nranks.to_le_bytes());
    p
}

fn parse_preamble(p: &[u8; PREAMBLE_LEN]) -> Option<(u32, u32, u32)> {
    if p[..4] != PREAMBLE_MAGIC {
        return None;
    }
    let word = |at: usize| u32::from_le_bytes(p[at..at + 4].try_into().unwrap());
    Some((word(4), word(8), word(12)))
}

/// Resolves the listening address of every rank. `hosts` is a
/// comma-separated list of `host` or `host:port`, one per rank; empty means
/// every rank is on 127.0.0.1. A missing port defaults to `port_base + rank`.
pub(crate) fn parse_hosts(hosts: &str, nranks: u32, port_base: u16) -> Result<Vec<SocketAddr>> {
    let entries: Vec<&str> = if hosts.trim().is_empty() {
        vec!["127.0.0.1"; nranks as usize]
    } else {
        hosts.split(',').map(str::trim).collect()
    };
    if entries.len() != nranks as usize {
        return Err(bad_arg(format!(
            "host list names {} ranks but the world has {nranks}",
            entries.len()
        )));
    }
    entries
        .iter()
        .enumerate()
        .map(|(rank, entry)| {
            let default_port = u32::from(port_base) + rank as u32;
            let default_port = u16::try_from(default_port).map_err(|_| {
                bad_arg(format!(
                    "port {default_port} for rank {rank} is out of range"
                ))
            })?;
            let spec = if entry
                .rsplit_once(':')
                .is_some_and(|(_, p)| p.parse::<u16>().is_ok())
            {
                (*entry).to_string()
            } else {
                format!("{entry}:{default_port}")
            };
            let addrs: Vec<SocketAddr> = spec
                .to_socket_addrs()
                .map_err(|e| bad_arg(format!("cannot resolve {spec:?}: {e}")))?
                .collect();
            addrs
                .iter()
                .find(|a| a.is_ipv4())
                .or(addrs.first())
                .copied()
                .ok_or_else(|| bad_arg(format!("{spec:?} resolves to no address")))
        })
        .collect()
}

struct Accepted {
    streams: Mutex<HashMap<(u32, u32), TcpStream>>,
    arrived: Condvar,
    stop: AtomicBool,
}

/// Process-wide TCP state: the listener thread and the peer address book.
pub(crate) struct World {
    rank: u32,
    nranks: u32,
    addrs: Vec<SocketAddr>,
    timeout: Duration,
    accepted: Arc<Accepted>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
    local: SocketAddr,
}

impl World {
    pub(crate) fn start(
        rank: u32,
        nranks: u32,
        hosts: &str,
        port_base: u16,
        timeout: Duration,
    ) -> Result<Arc<World>> {
        if rank >= nranks {
            return Err(bad_arg(format!(
                "rank {rank} is outside a world of {nranks}"
            )));
        }
        let addrs = parse_hosts(hosts, nranks, port_base)?;
        let listener = TcpListener::bind(addrs[rank as usize]).map_err(|e| {
            Error::Transport(format!("cannot listen on {}: {e}", addrs[rank as usize]))
        })?;
        let local = listener.local_addr()?;
        let accepted = Arc::new(Accepted {
            streams: Mutex::new(HashMap::new()),
            arrived: Condvar::new(),
            stop: AtomicBool::new(false),
        });
        let acc = accepted.clone();
        let handle = std::thread::Builder::new()
            .name(format!("lci-accept-{rank}"))
            .spawn(move || accept_loop(listener, acc, nranks))?;
        Ok(Arc::new(World {
            rank,
            nranks,
            addrs,
            timeout,
            accepted,
            acceptor: Mutex::new(Some(handle)),
            local,
        }))
    }

    pub(crate) fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Opens the connections of device `device` to every peer.
    pub(crate) fn connect(&self, device: u32, depth: usize) -> Result<Endpoint> {
        let deadline = Instant::now() + self.timeout;
        let mut links = Vec::with_capacity(self.nranks as usize);
        for peer in 0..self.nranks {
            let stream = match peer.cmp(&self.rank) {
                std::cmp::Ordering::Equal => {
                    links.push(None);
                    continue;
                }
                std::cmp::Ordering::Less => self.dial(peer, device, deadline)?,
                std::cmp::Ordering::Greater => self.await_peer(peer, device, deadline)?,
            };
            stream.set_nodelay(true)?;
            stream.set_nonblocking(true)?;
            links.push(Some(Arc::new(Link::new(peer, stream, depth))));
        }
        Ok(Endpoint {
            rank: self.rank,
            links: links.into_boxed_slice(),
            local: Channel::new(depth),
            cursor: AtomicUsize::new(0),
        })
    }

    fn dial(&self, peer: u32, device: u32, deadline: Instant) -> Result<TcpStream> {
        let addr = self.addrs[peer as usize];
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Transport(format!(
                    "timed out connecting to rank {peer} at {addr}"
                )));
            }
            match TcpStream::connect_timeout(&addr, left) {
                Ok(mut s) => {
                    s.write_all(&preamble(self.rank, device, self.nranks))?;
                    return Ok(s);
                }
                Err(_) => std::thread::sleep(Duration::from_millis(20).min(left)),
            }
        }
    }

    fn await_peer(&self, peer: u32, device: u32, deadline: Instant) -> Result<TcpStream> {
        let mut streams = self.accepted.streams.lock();
        loop {
            if let Some(s) = streams.remove(&(peer, device)) {
                return Ok(s);
            }
            if self
                .accepted
                .arrived
                .wait_until(&mut streams, deadline)
                .timed_out()
            {
                return streams.remove(&(peer, device)).ok_or_else(|| {
                    Error::Transport(format!(
                        "timed out waiting for rank {peer} to connect device {device}"
                    ))
                });
            }
        }
    }

    pub(crate) fn stop(&self) {
        if self.accepted.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_secs(1));
        if let Some(h) = self.acceptor.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for World {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, acc: Arc<Accepted>, nranks: u32) {
    for stream in listener.incoming() {
        if acc.stop.load(Ordering::Acquire) {
            break;
        }
        let Ok(mut stream) = stream else {
            continue;
        };
        let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
        let mut p = [0u8; PREAMBLE_LEN];
        if stream.read_exact(&mut p).is_err() {
            continue;
        }
        let _ = stream.set_read_timeout(None);
        match parse_preamble(&p) {
            Some((rank, device, n)) if n == nranks && rank < nranks => {
                acc.streams.lock().insert((rank, device), stream);
                acc.arrived.notify_all();
            }
            _ => continue,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
    pos: usize,
}

struct Reader {
    decoder: FrameDecoder,
    scratch: Box<[u8]>,
    eof: bool,
}

struct Link {
    peer: u32,
    stream: TcpStream,
    tx: ArrayQueue<Frame>,
    writer: Mutex<Writer>,
    reader: Mutex<Reader>,
    peer_closed: AtomicBool,
}

impl Link {
    fn new(peer: u32, stream: TcpStream, depth: usize) -> Self {
        Link {
            peer,
            stream,
            tx: ArrayQueue::new(depth),
            writer: Mutex::new(Writer {
                buf: Vec::new(),
                pos: 0,
            }),
            reader: Mutex::new(Reader {
                decoder: FrameDecoder::new(),
                scratch: vec![0; READ_CHUNK].into_boxed_slice(),
                eof: false,
            }),
            peer_closed: AtomicBool::new(false),
        }
    }

    /// Writes queued frames until the socket would block. Skips if another
    /// thread holds the writer.
    fn flush(&self) -> Result<bool> {
        let Some(mut w) = self.writer.try_lock() else {
            return Ok(false);
        };
        let mut did = false;
        loop {
            if w.pos < w.buf.len() {
                let w = &mut *w;
                match (&self.stream).write(&w.buf[w.pos..]) {
                    Ok(0) => {
                        return Err(Error::Transport(format!(
                            "connection to rank {} accepted no bytes",
                            self.peer
                        )))
                    }
                    Ok(n) => {
                        w.pos += n;
                        did = true;
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == ErrorKind::Interrupted => {}
                    Err(e) => {
                        return Err(Error::Transport(format!(
                            "write to rank {} failed: {e}",
                            self.peer
                        )))
                    }
                }
                continue;
            }
            w.buf.clear();
            w.pos = 0;
            let mut n = 0;
            while n < FLUSH_BATCH {
                let Some(frame) = self.tx.pop() else {
                    break;
                };
                frame.write_to(&mut w.buf);
                n += 1;
            }
            if n == 0 {
                break;
            }
        }
        Ok(did)
    }

    fn outbound(&self) -> usize {
        let buffered = match self.writer.try_lock() {
            Some(w) => usize::from(w.pos < w.buf.len()),
            None => 1,
        };
        self.tx.len() + buffered
    }

    fn read(&self, dev: &DeviceInner, budget: usize) -> Result<usize> {
        let Some(mut r) = self.reader.try_lock() else {
            return Ok(0);
        };
        let mut n = 0;
        loop {
            while n < budget {
                let Some(frame) = r.decoder.next_frame()? else {
                    break;
                };
                dev.handle(frame)?;
                n += 1;
            }
            if n >= budget || r.eof {
                break;
            }
            let Reader {
                decoder,
                scratch,
                eof,
            } = &mut *r;
            match (&self.stream).read(scratch) {
                Ok(0) => {
                    *eof = true;
                    if decoder.buffered() > 0 {
                        return Err(Error::Transport(format!(
                            "connection to rank {} closed in the middle of a frame",
                            self.peer
                        )));
                    }
                    self.peer_closed.store(true, Ordering::Release);
                }
                Ok(k) => decoder.extend(&scratch[..k]),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Transport(format!(
                        "read from rank {} failed: {e}",
                        self.peer
                    )))
                }
            }
        }
        Ok(n)
    }

    /// Reads and discards until the peer closes its side.
    fn drain_to_eof(&self, deadline: Instant) -> Result<()> {
        let mut r = self.reader.lock();
        if r.eof {
            return Ok(());
        }
        loop {
            match (&self.stream).read(&mut r.scratch) {
                Ok(0) => {
                    r.eof = true;
                    return Ok(());
                }
                Ok(_) => {}
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Transport(format!(
                            "rank {} did not close its connection in time",
                            self.peer
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                // A reset after our shutdown still means the peer is gone.
                Err(_) => return Ok(()),
            }
        }
    }
}

pub(crate) struct Endpoint {
    rank: u32,
    links: Box<[Option<Arc<Link>>]>,
    local: Channel,
    cursor: AtomicUsize,
}

impl Endpoint {
    pub(crate) fn push(&self, peer: u32, frame: Frame) -> Result<Option<Frame>> {
        if peer == self.rank {
            return Ok(self.local.push(frame));
        }
        let link = self.links[peer as usize]
            .as_ref()
            .expect("link to every peer");
        if link.peer_closed.load(Ordering::Acquire) {
            return Err(Error::Transport(format!(
                "connection to rank {peer} is closed"
            )));
        }
        if let Err(frame) = link.tx.push(frame) {
            return Ok(Some(frame));
        }
        link.flush()?;
        Ok(None)
    }

    pub(crate) fn poll(&self, dev: &DeviceInner, budget: usize) -> Result<usize> {
        let mut n = self.local.drain(dev, budget)?;
        let start = self.cursor.fetch_add(1, Ordering::Relaxed);
        for i in 0..self.links.len() {
            if n >= budget {
                break;
            }
            if let Some(link) = &self.links[(start + i) % self.links.len()] {
                n += link.read(dev, budget - n)?;
            }
        }
        Ok(n)
    }

    pub(crate) fn flush(&self) -> Result<bool> {
        let mut did = false;
        for link in self.links.iter().flatten() {
            did |= link.flush()?;
        }
        Ok(did)
    }

    pub(crate) fn outbound(&self) -> usize {
        self.links.iter().flatten().map(|l| l.outbound()).sum()
    }

    /// Flushes everything, half-closes every connection and waits for each
    /// peer to do the same.
    pub(crate) fn close(&self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        for link in self.links.iter().flatten() {
            while link.outbound() > 0 {
                link.flush()?;
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!(
                        "could not flush the connection to rank {}",
                        link.peer
                    )));
                }
                std::thread::yield_now();
            }
            let _ = link.stream.shutdown(Shutdown::Write);
        }
        for link in self.links.iter().flatten() {
            link.drain_to_eof(deadline)?;
        }
        Ok(())
    }

    pub(crate) fn abort(&self) {
        for link in self.links.iter().flatten() {
            let _ = link.stream.shutdown(Shutdown::Both);
        }
    }
}
