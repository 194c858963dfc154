//! Devices and the wire protocol they speak.
//!
//! A device owns one endpoint per peer (a bounded in-memory channel for the
//! loopback backend, a socket for TCP), a packet pool for eager buffers and
//! the bookkeeping of its in-flight rendezvous and one-sided transfers.
//! Nothing moves unless some thread calls [`Device::progress`].

pub(crate) mod loopback;
pub(crate) mod tcp;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use crossbeam_queue::SegQueue;
use parking_lot::{Mutex, RwLock};

use crate::attr::{AttrSet, AttrValue};
use crate::completion::Comp;
use crate::error::{bad_arg, Error, Result};
use crate::frame::{
    Frame, FrameHeader, InflightGuard, Opcode, Payload, FLAG_META_IN_PAYLOAD, HEADER_LEN,
};
use crate::matching::MatchingEngine;
use crate::memory::{MemoryRegistration, MemoryTable, Region, RegistrationUse};
use crate::packet_pool::PacketPool;
use crate::rcomp::RcompRegistry;
use crate::types::{
    make_match_key, BufferDesc, ImmData, OpKind, Rank, Status, Tag, IMM_RCOMP_LIMIT, IMM_TAG_LIMIT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Tcp => "tcp",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "loopback" => Ok(TransportKind::Loopback),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(bad_arg(format!("unknown transport {other:?}"))),
        }
    }
}

/// State every device of one rank shares.
pub(crate) struct RankShared {
    pub(crate) rank: u32,
    pub(crate) nranks: u32,
    pub(crate) engines: RwLock<Vec<MatchingEngine>>,
    pub(crate) rcomps: RcompRegistry,
    pub(crate) memory: MemoryTable,
}

impl RankShared {
    pub(crate) fn new(rank: u32, nranks: u32) -> Self {
        RankShared {
            rank,
            nranks,
            engines: RwLock::new(Vec::new()),
            rcomps: RcompRegistry::new(),
            memory: MemoryTable::new(rank),
        }
    }

    fn engine(&self, index: u8) -> Result<MatchingEngine> {
        let engines = self.engines.read();
        match engines.get(index as usize) {
            Some(e) if !e.is_freed() => Ok(e.clone()),
            _ => Err(Error::Transport(format!(
                "frame names matching engine {index}, which does not exist on rank {}",
                self.rank
            ))),
        }
    }
}

/// A send that reached the matching engine before its receive.
pub(crate) enum SendArrival {
    Eager {
        src: u32,
        tag: u64,
        data: Bytes,
    },
    Rts {
        src: u32,
        tag: u64,
        total: usize,
        sender_xfer: u64,
        device: Arc<DeviceInner>,
    },
}

/// A posted receive waiting in the matching engine.
pub(crate) struct RecvPost {
    pub(crate) buf: BufferDesc,
    pub(crate) comp: Comp,
    pub(crate) user_context: u64,
    pub(crate) device: Arc<DeviceInner>,
    pub(crate) _hold: Option<RegistrationUse>,
}

impl RecvPost {
    /// Places `data` into the receive buffer and builds its status.
    pub(crate) fn land(&self, src: u32, tag: u64, data: Bytes) -> Result<Status> {
        if data.len() > self.buf.len() {
            return Err(Error::Truncate {
                incoming: data.len(),
                capacity: self.buf.len(),
            });
        }
        let window = self.buf.registration_window();
        if let Some((mr, off)) = &window {
            mr.write(*off, &data)?;
        }
        Ok(Status::new(
            OpKind::Recv,
            Rank(src),
            Tag(tag),
            BufferDesc::landed(data, window),
            self.user_context,
        ))
    }

    pub(crate) fn deliver(self, src: u32, tag: u64, data: Bytes) -> Result<()> {
        let status = self.land(src, tag, data)?;
        self.device.complete(&self.comp, status)
    }
}

/// Origin-side record of a put or get awaiting its reply.
pub(crate) struct PendingOp {
    pub(crate) op: OpKind,
    pub(crate) peer: u32,
    pub(crate) tag: u64,
    pub(crate) rcomp: u32,
    pub(crate) comp: Comp,
    pub(crate) user_context: u64,
    pub(crate) buffer: BufferDesc,
    pub(crate) hold: Option<RegistrationUse>,
}

/// Origin side of a rendezvous transfer.
pub(crate) struct SendXfer {
    pub(crate) op: OpKind,
    pub(crate) peer: u32,
    pub(crate) tag: u64,
    pub(crate) rcomp: u32,
    pub(crate) data: Bytes,
    pub(crate) comp: Comp,
    pub(crate) user_context: u64,
    pub(crate) buffer: BufferDesc,
    pub(crate) hold: Option<RegistrationUse>,
    receiver: Option<u64>,
    sent: usize,
}

impl SendXfer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        op: OpKind,
        peer: u32,
        tag: u64,
        rcomp: u32,
        data: Bytes,
        comp: Comp,
        user_context: u64,
        buffer: BufferDesc,
        hold: Option<RegistrationUse>,
    ) -> Self {
        SendXfer {
            op,
            peer,
            tag,
            rcomp,
            data,
            comp,
            user_context,
            buffer,
            hold,
            receiver: None,
            sent: 0,
        }
    }
}

enum RecvTarget {
    Post(RecvPost),
    Am(Comp),
}

/// Target side of a rendezvous transfer.
struct RecvXfer {
    src: u32,
    tag: u64,
    rcomp: u32,
    buf: BytesMut,
    done: usize,
    target: RecvTarget,
}

/// Writes `(tag, rcomp)` into a header, using the immediate word when both
/// fit and the full metadata words otherwise.
pub(crate) fn set_meta(h: &mut FrameHeader, tag: u64, rcomp: u32) {
    h.tag = tag;
    if tag < IMM_TAG_LIMIT && rcomp < IMM_RCOMP_LIMIT {
        let kind = u32::from(rcomp != 0);
        h.imm = ImmData::encode(tag as u32, rcomp, kind)
            .expect("fields checked against their limits")
            .raw();
    } else {
        h.flags |= FLAG_META_IN_PAYLOAD;
        h.rcomp = rcomp;
    }
}

pub(crate) fn meta(h: &FrameHeader) -> (u64, u32) {
    if h.meta_in_payload() {
        (h.tag, h.rcomp)
    } else {
        let imm = ImmData(h.imm);
        let rcomp = if imm.kind() == 1 { imm.rcomp() } else { 0 };
        (u64::from(imm.tag16()), rcomp)
    }
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn short(op: Opcode, len: usize) -> Error {
    Error::Transport(format!(
        "{op:?} frame with a {len}-byte payload is malformed"
    ))
}

pub(crate) enum Backend {
    Loopback(loopback::Endpoint),
    Tcp(Box<tcp::Endpoint>),
}

impl Backend {
    fn push(&self, peer: u32, frame: Frame) -> Result<Option<Frame>> {
        match self {
            Backend::Loopback(e) => Ok(e.push(peer, frame)),
            Backend::Tcp(e) => e.push(peer, frame),
        }
    }

    fn poll(&self, dev: &DeviceInner, budget: usize) -> Result<usize> {
        match self {
            Backend::Loopback(e) => e.poll(dev, budget),
            Backend::Tcp(e) => e.poll(dev, budget),
        }
    }

    fn flush(&self) -> Result<bool> {
        match self {
            Backend::Loopback(_) => Ok(false),
            Backend::Tcp(e) => e.flush(),
        }
    }

    fn outbound(&self) -> usize {
        match self {
            Backend::Loopback(_) => 0,
            Backend::Tcp(e) => e.outbound(),
        }
    }

    fn kind(&self) -> TransportKind {
        match self {
            Backend::Loopback(_) => TransportKind::Loopback,
            Backend::Tcp(_) => TransportKind::Tcp,
        }
    }
}

pub(crate) struct DeviceInner {
    me: Weak<DeviceInner>,
    index: u32,
    pub(crate) shared: Arc<RankShared>,
    pool: PacketPool,
    backend: Backend,
    batch: usize,
    chunk: usize,
    posted: AtomicU64,
    completed: AtomicU64,
    inflight: Arc<AtomicUsize>,
    next_xfer: AtomicU64,
    pending: Mutex<HashMap<u64, PendingOp>>,
    sends: Mutex<HashMap<u64, SendXfer>>,
    active_sends: AtomicUsize,
    recvs: Mutex<HashMap<u64, RecvXfer>>,
    deferred: SegQueue<(u32, Frame)>,
    attrs: AttrSet,
    freed: AtomicBool,
}

impl DeviceInner {
    pub(crate) fn rank(&self) -> u32 {
        self.shared.rank
    }

    pub(crate) fn pool(&self) -> &PacketPool {
        &self.pool
    }

    /// Largest payload sent eagerly in one packet.
    pub(crate) fn eager_limit(&self) -> usize {
        self.chunk
    }

    pub(crate) fn next_xfer(&self) -> u64 {
        self.next_xfer.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn is_freed(&self) -> bool {
        self.freed.load(Ordering::Acquire)
    }

    pub(crate) fn note_posted(&self) {
        self.posted.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn unpost(&self) {
        self.posted.fetch_sub(1, Ordering::AcqRel);
    }

    pub(crate) fn note_completed(&self) {
        self.completed.fetch_add(1, Ordering::AcqRel);
    }

    /// Counts a post that finished without touching a completion object.
    pub(crate) fn note_immediate(&self) {
        self.posted.fetch_add(1, Ordering::AcqRel);
        self.completed.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn complete(&self, comp: &Comp, status: Status) -> Result<()> {
        self.completed.fetch_add(1, Ordering::AcqRel);
        comp.signal(status)
    }

    fn guarded(&self, mut frame: Frame) -> Frame {
        if frame.guard.is_none() {
            frame.guard = Some(InflightGuard::new(&self.inflight));
        }
        frame
    }

    /// Hands a frame to the backend; a full endpoint gives it back.
    pub(crate) fn push(&self, peer: u32, frame: Frame) -> Result<Option<Frame>> {
        if peer >= self.shared.nranks {
            return Err(bad_arg(format!(
                "rank {peer} is outside a world of {}",
                self.shared.nranks
            )));
        }
        self.backend.push(peer, self.guarded(frame))
    }

    /// Protocol replies never report backpressure to anyone; when the
    /// endpoint is full they wait in the deferred queue for a later progress.
    fn send_internal(&self, peer: u32, frame: Frame) -> Result<()> {
        let frame = self.guarded(frame);
        if self.deferred.is_empty() {
            if let Some(f) = self.backend.push(peer, frame)? {
                self.deferred.push((peer, f));
            }
        } else {
            self.deferred.push((peer, frame));
        }
        Ok(())
    }

    pub(crate) fn insert_pending(&self, id: u64, op: PendingOp) {
        self.pending.lock().insert(id, op);
    }

    pub(crate) fn remove_pending(&self, id: u64) -> Option<PendingOp> {
        self.pending.lock().remove(&id)
    }

    pub(crate) fn insert_send(&self, id: u64, x: SendXfer) {
        self.sends.lock().insert(id, x);
    }

    pub(crate) fn remove_send(&self, id: u64) -> Option<SendXfer> {
        self.sends.lock().remove(&id)
    }

    pub(crate) fn progress(&self) -> Result<bool> {
        let mut did = self.flush_deferred()?;
        did |= self.backend.poll(self, self.batch)? > 0;
        if self.active_sends.load(Ordering::Acquire) > 0 {
            did |= self.advance_sends()?;
        }
        did |= self.backend.flush()?;
        Ok(did)
    }

    fn flush_deferred(&self) -> Result<bool> {
        let mut did = false;
        for _ in 0..self.deferred.len() {
            let Some((peer, frame)) = self.deferred.pop() else {
                break;
            };
            match self.backend.push(peer, frame)? {
                None => did = true,
                Some(frame) => {
                    self.deferred.push((peer, frame));
                    break;
                }
            }
        }
        Ok(did)
    }

    fn advance_sends(&self) -> Result<bool> {
        let mut did = false;
        let mut finished = Vec::new();
        {
            let mut sends = self.sends.lock();
            let mut ids = Vec::new();
            'xfers: for (&id, x) in sends.iter_mut() {
                let Some(receiver) = x.receiver else {
                    continue;
                };
                while x.sent < x.data.len() {
                    let end = (x.sent + self.chunk).min(x.data.len());
                    let mut h = FrameHeader::new(Opcode::RndvData, self.rank());
                    h.xfer_id = receiver;
                    h.tag = x.sent as u64;
                    let frame = Frame::new(h, Payload::Bytes(x.data.slice(x.sent..end)));
                    if self.push(x.peer, frame)?.is_some() {
                        break 'xfers;
                    }
                    x.sent = end;
                    did = true;
                }
                ids.push(id);
            }
            for id in ids {
                finished.push(sends.remove(&id).expect("finished transfer"));
            }
        }
        self.active_sends
            .fetch_sub(finished.len(), Ordering::AcqRel);
        for x in finished {
            let status = Status::new(x.op, Rank(x.peer), Tag(x.tag), x.buffer, x.user_context)
                .with_rcomp(x.rcomp);
            drop(x.hold);
            self.complete(&x.comp, status)?;
        }
        Ok(did)
    }

    /// Sends CTS for an RTS whose destination is now known.
    pub(crate) fn accept_rts(
        &self,
        post: RecvPost,
        src: u32,
        tag: u64,
        total: usize,
        sender_xfer: u64,
    ) -> Result<()> {
        if total > post.buf.len() {
            return Err(Error::Truncate {
                incoming: total,
                capacity: post.buf.len(),
            });
        }
        self.start_recv(src, tag, 0, total, sender_xfer, RecvTarget::Post(post))
    }

    fn start_recv(
        &self,
        src: u32,
        tag: u64,
        rcomp: u32,
        total: usize,
        sender_xfer: u64,
        target: RecvTarget,
    ) -> Result<()> {
        let id = self.next_xfer();
        self.recvs.lock().insert(
            id,
            RecvXfer {
                src,
                tag,
                rcomp,
                buf: BytesMut::zeroed(total),
                done: 0,
                target,
            },
        );
        let mut h = FrameHeader::new(Opcode::Cts, self.rank());
        h.xfer_id = sender_xfer;
        let body = Bytes::copy_from_slice(&id.to_le_bytes());
        self.send_internal(src, Frame::new(h, Payload::Bytes(body)))
    }

    /// Dispatches one inbound frame.
    pub(crate) fn handle(&self, frame: Frame) -> Result<()> {
        let h = frame.header;
        let src = h.src_rank;
        let len = frame.payload.len();
        match h.opcode {
            Opcode::EagerSend => {
                let (tag, _) = meta(&h);
                let engine = self.shared.engine(h.engine_index())?;
                let key = make_match_key(Rank(src), Tag(tag), engine.policy());
                let data = frame.payload.to_bytes();
                drop(frame);
                if let Some((_, post)) = engine.store().insert_send(
                    key,
                    SendArrival::Eager {
                        src,
                        tag,
                        data: data.clone(),
                    },
                ) {
                    post.deliver(src, tag, data)?;
                }
            }
            Opcode::EagerAm => {
                let (tag, rcomp) = meta(&h);
                let comp = self.shared.rcomps.lookup(rcomp)?;
                // Payloads surrendered to the user hold their packet until
                // dropped; past half the pool, copy to the heap instead so
                // unconsumed arrivals cannot starve this device's own sends.
                let roomy = self.pool.free_count() * 2 > self.pool.capacity();
                let data = match self.pool.alloc().filter(|_| roomy) {
                    Some(mut p) if p.capacity() >= len => {
                        p.fill(&frame.payload);
                        Bytes::from_owner(p)
                    }
                    _ => frame.payload.to_bytes(),
                };
                drop(frame);
                let status = Status::new(
                    OpKind::AmRecv,
                    Rank(src),
                    Tag(tag),
                    BufferDesc::from_bytes(data),
                    0,
                )
                .with_rcomp(rcomp);
                comp.signal(status)?;
            }
            Opcode::Rts => {
                if len < 8 {
                    return Err(short(h.opcode, len));
                }
                let total = le_u64(&frame.payload, 0) as usize;
                drop(frame);
                let (tag, rcomp) = meta(&h);
                if rcomp != 0 {
                    let comp = self.shared.rcomps.lookup(rcomp)?;
                    return self.start_recv(
                        src,
                        tag,
                        rcomp,
                        total,
                        h.xfer_id,
                        RecvTarget::Am(comp),
                    );
                }
                let engine = self.shared.engine(h.engine_index())?;
                let key = make_match_key(Rank(src), Tag(tag), engine.policy());
                let arrival = SendArrival::Rts {
                    src,
                    tag,
                    total,
                    sender_xfer: h.xfer_id,
                    device: self.me.upgrade().expect("device alive while dispatching"),
                };
                if let Some((_, post)) = engine.store().insert_send(key, arrival) {
                    self.accept_rts(post, src, tag, total, h.xfer_id)?;
                }
            }
            Opcode::Cts => {
                if len < 8 {
                    return Err(short(h.opcode, len));
                }
                let receiver = le_u64(&frame.payload, 0);
                drop(frame);
                {
                    let mut sends = self.sends.lock();
                    let x = sends.get_mut(&h.xfer_id).ok_or_else(|| {
                        Error::Transport(format!("CTS for unknown transfer {}", h.xfer_id))
                    })?;
                    if x.receiver.replace(receiver).is_some() {
                        return Err(Error::Transport(format!(
                            "duplicate CTS for transfer {}",
                            h.xfer_id
                        )));
                    }
                }
                self.active_sends.fetch_add(1, Ordering::AcqRel);
                self.advance_sends()?;
            }
            Opcode::RndvData => {
                let off = h.tag as usize;
                let finished = {
                    let mut recvs = self.recvs.lock();
                    let x = recvs.get_mut(&h.xfer_id).ok_or_else(|| {
                        Error::Transport(format!("data for unknown transfer {}", h.xfer_id))
                    })?;
                    if off.checked_add(len).is_none_or(|end| end > x.buf.len()) {
                        return Err(Error::Transport(format!(
                            "chunk [{off}, +{len}) overruns a {}-byte transfer",
                            x.buf.len()
                        )));
                    }
                    x.buf[off..off + len].copy_from_slice(&frame.payload);
                    x.done += len;
                    if x.done >= x.buf.len() {
                        recvs.remove(&h.xfer_id)
                    } else {
                        None
                    }
                };
                drop(frame);
                if let Some(x) = finished {
                    let data = x.buf.freeze();
                    match x.target {
                        RecvTarget::Post(post) => post.deliver(x.src, x.tag, data)?,
                        RecvTarget::Am(comp) => {
                            let status = Status::new(
                                OpKind::AmRecv,
                                Rank(x.src),
                                Tag(x.tag),
                                BufferDesc::from_bytes(data),
                                0,
                            )
                            .with_rcomp(x.rcomp);
                            comp.signal(status)?;
                        }
                    }
                }
            }
            Opcode::Put => {
                if len < 16 {
                    return Err(short(h.opcode, len));
                }
                let rkey = le_u64(&frame.payload, 0);
                let off = le_u64(&frame.payload, 8) as usize;
                let mr = self.shared.memory.lookup(rkey)?;
                mr.write(off, &frame.payload[16..])?;
                drop(frame);
                let (tag, rcomp) = meta(&h);
                if rcomp != 0 {
                    self.signal_target(OpKind::PutSignal, src, tag, rcomp, &mr, off, len - 16)?;
                }
                let mut ack = FrameHeader::new(Opcode::PutAck, self.rank());
                ack.xfer_id = h.xfer_id;
                self.send_internal(src, Frame::new(ack, Payload::Empty))?;
            }
            Opcode::GetReq => {
                if len < 24 {
                    return Err(short(h.opcode, len));
                }
                let rkey = le_u64(&frame.payload, 0);
                let off = le_u64(&frame.payload, 8) as usize;
                let want = le_u64(&frame.payload, 16) as usize;
                drop(frame);
                let mr = self.shared.memory.lookup(rkey)?;
                let data = mr.read(off, want)?;
                let mut rep = FrameHeader::new(Opcode::GetRep, self.rank());
                rep.xfer_id = h.xfer_id;
                self.send_internal(src, Frame::new(rep, Payload::Bytes(Bytes::from(data))))?;
                let (tag, rcomp) = meta(&h);
                if rcomp != 0 {
                    self.signal_target(OpKind::GetSignal, src, tag, rcomp, &mr, off, want)?;
                }
            }
            Opcode::PutAck => {
                drop(frame);
                let op = self.reply_target(h)?;
                let status = Status::new(
                    op.op,
                    Rank(op.peer),
                    Tag(op.tag),
                    op.buffer,
                    op.user_context,
                )
                .with_rcomp(op.rcomp);
                drop(op.hold);
                self.complete(&op.comp, status)?;
            }
            Opcode::GetRep => {
                let data = frame.payload.to_bytes();
                drop(frame);
                let op = self.reply_target(h)?;
                if data.len() > op.buffer.len() {
                    return Err(Error::Truncate {
                        incoming: data.len(),
                        capacity: op.buffer.len(),
                    });
                }
                let window = op.buffer.registration_window();
                if let Some((mr, off)) = &window {
                    mr.write(*off, &data)?;
                }
                let status = Status::new(
                    OpKind::Get,
                    Rank(op.peer),
                    Tag(op.tag),
                    BufferDesc::landed(data, window),
                    op.user_context,
                )
                .with_rcomp(op.rcomp);
                drop(op.hold);
                self.complete(&op.comp, status)?;
            }
        }
        Ok(())
    }

    fn reply_target(&self, h: FrameHeader) -> Result<PendingOp> {
        self.remove_pending(h.xfer_id).ok_or_else(|| {
            Error::Transport(format!(
                "{:?} for unknown operation {}",
                h.opcode, h.xfer_id
            ))
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn signal_target(
        &self,
        op: OpKind,
        src: u32,
        tag: u64,
        rcomp: u32,
        mr: &MemoryRegistration,
        off: usize,
        len: usize,
    ) -> Result<()> {
        let comp = self.shared.rcomps.lookup(rcomp)?;
        let window = BufferDesc::registered(mr, off, len)?;
        comp.signal(Status::new(op, Rank(src), Tag(tag), window, 0).with_rcomp(rcomp))
    }

    /// Zero exactly when the device has nothing in flight.
    pub(crate) fn outstanding(&self) -> usize {
        let posted = self.posted.load(Ordering::Acquire);
        let completed = self.completed.load(Ordering::Acquire);
        posted.saturating_sub(completed) as usize
            + self.inflight.load(Ordering::Acquire)
            + self.deferred.len()
            + self.pending.lock().len()
            + self.sends.lock().len()
            + self.recvs.lock().len()
            + self.backend.outbound()
    }

    pub(crate) fn close(&self, timeout: Duration) -> Result<()> {
        match &self.backend {
            Backend::Loopback(_) => Ok(()),
            Backend::Tcp(e) => e.close(timeout),
        }
    }

    pub(crate) fn abort(&self) {
        if let Backend::Tcp(e) = &self.backend {
            e.abort();
        }
    }
}

impl fmt::Debug for DeviceInner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("rank", &self.shared.rank)
            .field("index", &self.index)
            .field("transport", &self.backend.kind())
            .finish()
    }
}

/// Outcome of [`Device::send_frame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSend {
    Sent,
    /// The endpoint is full; the frame was dropped and may be resent.
    Retry,
}

/// A set of network resources with its own progress.
#[derive(Clone)]
pub struct Device {
    pub(crate) inner: Arc<DeviceInner>,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.inner.fmt(f)
    }
}

impl Device {
    pub(crate) fn new(
        index: u32,
        shared: Arc<RankShared>,
        pool: PacketPool,
        backend: Backend,
        attrs: AttrSet,
    ) -> Result<Device> {
        let batch = attrs.usize("max_progress_batch");
        let chunk = pool
            .packet_size()
            .checked_sub(HEADER_LEN)
            .filter(|&c| c > 0)
            .ok_or_else(|| {
                bad_arg(format!(
                    "packet size {} leaves no room after the {HEADER_LEN}-byte header",
                    pool.packet_size()
                ))
            })?;
        let inner = Arc::new_cyclic(|me| DeviceInner {
            me: me.clone(),
            index,
            shared,
            pool,
            backend,
            batch,
            chunk,
            posted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            inflight: Arc::new(AtomicUsize::new(0)),
            next_xfer: AtomicU64::new(1),
            pending: Mutex::new(HashMap::new()),
            sends: Mutex::new(HashMap::new()),
            active_sends: AtomicUsize::new(0),
            recvs: Mutex::new(HashMap::new()),
            deferred: SegQueue::new(),
            attrs,
            freed: AtomicBool::new(false),
        });
        Ok(Device { inner })
    }

    pub fn index(&self) -> u32 {
        self.inner.index
    }

    pub fn rank(&self) -> Rank {
        Rank(self.inner.shared.rank)
    }

    /// Moves pending traffic forward. Returns whether anything happened.
    pub fn progress(&self) -> Result<bool> {
        self.inner.progress()
    }

    /// Pushes a raw frame toward `peer`. The receiver dispatches it like any
    /// other frame, so it must be a well-formed protocol message.
    pub fn send_frame(&self, peer: Rank, frame: Frame) -> Result<FrameSend> {
        Ok(match self.inner.push(peer.0, frame)? {
            None => FrameSend::Sent,
            Some(_) => FrameSend::Retry,
        })
    }

    pub fn packet_pool(&self) -> &PacketPool {
        &self.inner.pool
    }

    /// Largest message sent without a rendezvous.
    pub fn eager_limit(&self) -> usize {
        self.inner.chunk
    }

    /// Operations, frames and transfers not yet finished; zero when idle.
    pub fn outstanding(&self) -> usize {
        self.inner.outstanding()
    }

    pub fn register_memory(
        &self,
        region: &Region,
        base: usize,
        length: usize,
    ) -> Result<MemoryRegistration> {
        self.inner
            .shared
            .memory
            .register(self.inner.index, region, base, length)
    }

    pub fn deregister_memory(&self, mr: &MemoryRegistration) -> Result<()> {
        self.inner.shared.memory.deregister(mr)
    }

    pub fn get_attr(&self, name: &str) -> Result<AttrValue> {
        self.inner.attrs.lookup(name)
    }

    pub fn get_attr_transport(&self) -> TransportKind {
        self.inner.backend.kind()
    }

    pub fn get_attr_max_progress_batch(&self) -> usize {
        self.inner.batch
    }

    pub fn get_attr_outbound_queue_depth(&self) -> usize {
        self.inner.attrs.usize("outbound_queue_depth")
    }

    pub fn same(&self, other: &Device) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn mark_freed(&self) -> bool {
        !self.inner.freed.swap(true, Ordering::AcqRel)
    }
}
