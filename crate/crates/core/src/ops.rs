//! Posting operations.
//!
//! Each operation has a builder, `post_*_x`, that takes the required
//! arguments and offers chained setters for the optional ones. `call`
//! posts and leaves the builder untouched, so one builder can post the same
//! operation many times. Unset options fall back to the context defaults at
//! call time. The plain `post_*` functions post with every option unset.
//!
//! ```
//! # let _g = lci::test_lock();
//! use lci::{BufferDesc, PostResult, Rank, Tag};
//! let rt = lci::runtime_init_x().attr("nranks", 2).call().unwrap();
//! let (a, b) = (rt.context(0).unwrap(), rt.context(1).unwrap());
//! let recv = lci::post_recv_x(&b, Rank(0), BufferDesc::with_capacity(5), Tag(9)).user_context(7);
//! assert!(matches!(recv.call().unwrap(), PostResult::Posted));
//! let sent = lci::post_send(&a, Rank(1), BufferDesc::from_bytes(&b"hello"[..]), Tag(9)).unwrap();
//! assert!(sent.is_done());
//! let status = loop {
//!     b.progress().unwrap();
//!     if let Some(s) = b.default_cq().unwrap().pop() { break s; }
//! };
//! assert_eq!(&status.buffer.data()[..], b"hello");
//! assert_eq!(status.user_context, 7);
//! rt.finalize().unwrap();
//! ```

use bytes::{BufMut, Bytes, BytesMut};

use crate::completion::Comp;
use crate::error::{bad_arg, Result};
use crate::frame::{Frame, FrameHeader, Opcode, Payload};
use crate::matching::{EngineKind, MatchingEngine};
use crate::runtime::Context;
use crate::transport::{set_meta, Device, PendingOp, RecvPost, SendArrival, SendXfer};
use crate::types::{make_match_key, BufferDesc, OpKind, Rank, Status, Tag};

/// What a post did.
#[derive(Debug)]
pub enum PostResult {
    /// Finished during the call; no completion object is signaled.
    Done(Status),
    /// Accepted; the completion object is signaled once it finishes.
    Posted,
    /// Temporarily out of resources. Nothing changed; post again later.
    Retry,
}

impl PostResult {
    pub fn is_done(&self) -> bool {
        matches!(self, PostResult::Done(_))
    }

    pub fn is_posted(&self) -> bool {
        matches!(self, PostResult::Posted)
    }

    pub fn is_retry(&self) -> bool {
        matches!(self, PostResult::Retry)
    }

    pub fn status(self) -> Option<Status> {
        match self {
            PostResult::Done(s) => Some(s),
            _ => None,
        }
    }
}

/// Options shared by every operation.
#[derive(Clone, Default)]
struct Common {
    device: Option<Device>,
    comp: Option<Comp>,
    user_context: u64,
}

impl Common {
    fn device(&self, ctx: &Context) -> Result<Device> {
        let dev = match &self.device {
            Some(d) => d.clone(),
            None => ctx
                .default_device()
                .ok_or_else(|| bad_arg("no device given and the context has no default"))?,
        };
        if dev.inner.is_freed() {
            return Err(bad_arg(format!("device {} has been freed", dev.index())));
        }
        if dev.rank().0 != ctx.rank() {
            return Err(bad_arg(format!(
                "device belongs to rank {}, not rank {}",
                dev.rank().0,
                ctx.rank()
            )));
        }
        Ok(dev)
    }

    fn comp(&self, ctx: &Context) -> Result<Comp> {
        match &self.comp {
            Some(c) => Ok(c.clone()),
            None => ctx.default_cq().map(Comp::from).ok_or_else(|| {
                bad_arg("no completion object given and the context has no default queue")
            }),
        }
    }
}

fn engine(ctx: &Context, given: &Option<MatchingEngine>) -> Result<MatchingEngine> {
    let e = match given {
        Some(e) => e.clone(),
        None => ctx
            .default_matching_engine()
            .ok_or_else(|| bad_arg("no matching engine given and the context has no default"))?,
    };
    if e.is_freed() {
        return Err(bad_arg(format!(
            "matching engine {} has been freed",
            e.index()
        )));
    }
    Ok(e)
}

fn check_peer(ctx: &Context, peer: Rank) -> Result<()> {
    if peer.0 >= ctx.nranks() {
        return Err(bad_arg(format!(
            "rank {peer} is outside a world of {}",
            ctx.nranks()
        )));
    }
    Ok(())
}

macro_rules! common_setters {
    () => {
        pub fn device(mut self, device: &Device) -> Self {
            self.common.device = Some(device.clone());
            self
        }

        /// Completion object signaled when the operation finishes.
        pub fn comp(mut self, comp: impl Into<Comp>) -> Self {
            self.common.comp = Some(comp.into());
            self
        }

        /// Opaque value copied into the completion status.
        pub fn user_context(mut self, user_context: u64) -> Self {
            self.common.user_context = user_context;
            self
        }
    };
}

/// Posts a message carrying `(tag, rcomp)` metadata. Eager when it fits one
/// packet, rendezvous otherwise.
#[allow(clippy::too_many_arguments)]
fn post_message(
    ctx: &Context,
    dev: &Device,
    op: OpKind,
    opcode: Opcode,
    peer: Rank,
    buf: &BufferDesc,
    tag: u64,
    rcomp: u32,
    engine_index: u8,
    comp: impl FnOnce() -> Result<Comp>,
    user_context: u64,
) -> Result<PostResult> {
    let d = &dev.inner;
    let data = buf.outgoing()?;
    let mut h = FrameHeader::new(opcode, ctx.rank());
    set_meta(&mut h, tag, rcomp);
    h.set_engine_index(engine_index);
    if data.len() <= d.eager_limit() {
        let Some(mut pkt) = d.pool().alloc() else {
            return Ok(PostResult::Retry);
        };
        pkt.fill(&data);
        if d.push(peer.0, Frame::new(h, Payload::Packet(pkt)))?
            .is_some()
        {
            return Ok(PostResult::Retry);
        }
        d.note_immediate();
        let status = Status::new(op, peer, Tag(tag), buf.clone(), user_context).with_rcomp(rcomp);
        return Ok(PostResult::Done(status));
    }
    let comp = comp()?;
    let hold = buf.registration().map(|mr| mr.acquire()).transpose()?;
    let id = d.next_xfer();
    h.opcode = Opcode::Rts;
    h.xfer_id = id;
    let total = data.len() as u64;
    d.insert_send(
        id,
        SendXfer::new(
            op,
            peer.0,
            tag,
            rcomp,
            data,
            comp,
            user_context,
            buf.clone(),
            hold,
        ),
    );
    d.note_posted();
    let rts = Frame::new(
        h,
        Payload::Bytes(Bytes::copy_from_slice(&total.to_le_bytes())),
    );
    if d.push(peer.0, rts)?.is_some() {
        d.remove_send(id);
        d.unpost();
        return Ok(PostResult::Retry);
    }
    Ok(PostResult::Posted)
}

/// Two-sided send; matched at the target by `(source rank, tag)` under the
/// target engine's policy.
#[derive(Clone)]
pub struct PostSend {
    ctx: Context,
    peer: Rank,
    buf: BufferDesc,
    tag: Tag,
    engine: Option<MatchingEngine>,
    common: Common,
}

pub fn post_send_x(ctx: &Context, peer: Rank, buf: BufferDesc, tag: Tag) -> PostSend {
    PostSend {
        ctx: ctx.clone(),
        peer,
        buf,
        tag,
        engine: None,
        common: Common::default(),
    }
}

pub fn post_send(ctx: &Context, peer: Rank, buf: BufferDesc, tag: Tag) -> Result<PostResult> {
    post_send_x(ctx, peer, buf, tag).call()
}

impl PostSend {
    common_setters!();

    /// Engine at the target that matches this send. Engines are named by
    /// index, so the target must have allocated a matching one.
    pub fn matching_engine(mut self, engine: &MatchingEngine) -> Self {
        self.engine = Some(engine.clone());
        self
    }

    pub fn call(&self) -> Result<PostResult> {
        let ctx = &self.ctx;
        ctx.check_live()?;
        check_peer(ctx, self.peer)?;
        if self.tag.is_any() {
            return Err(bad_arg("a send needs a concrete tag"));
        }
        let dev = self.common.device(ctx)?;
        let engine_index = match &self.engine {
            Some(e) => e.index(),
            None => engine(ctx, &None).map(|e| e.index()).unwrap_or(0),
        };
        post_message(
            ctx,
            &dev,
            OpKind::Send,
            Opcode::EagerSend,
            self.peer,
            &self.buf,
            self.tag.0,
            0,
            engine_index,
            || self.common.comp(ctx),
            self.common.user_context,
        )
    }
}

/// Two-sided receive. `peer` and `tag` may be [`Rank::ANY`] and [`Tag::ANY`]
/// on a queue engine.
#[derive(Clone)]
pub struct PostRecv {
    ctx: Context,
    peer: Rank,
    buf: BufferDesc,
    tag: Tag,
    engine: Option<MatchingEngine>,
    common: Common,
}

pub fn post_recv_x(ctx: &Context, peer: Rank, buf: BufferDesc, tag: Tag) -> PostRecv {
    PostRecv {
        ctx: ctx.clone(),
        peer,
        buf,
        tag,
        engine: None,
        common: Common::default(),
    }
}

pub fn post_recv(ctx: &Context, peer: Rank, buf: BufferDesc, tag: Tag) -> Result<PostResult> {
    post_recv_x(ctx, peer, buf, tag).call()
}

impl PostRecv {
    common_setters!();

    pub fn matching_engine(mut self, engine: &MatchingEngine) -> Self {
        self.engine = Some(engine.clone());
        self
    }

    pub fn call(&self) -> Result<PostResult> {
        let ctx = &self.ctx;
        ctx.check_live()?;
        if !self.peer.is_any() {
            check_peer(ctx, self.peer)?;
        }
        let dev = self.common.device(ctx)?;
        let engine = engine(ctx, &self.engine)?;
        let comp = self.common.comp(ctx)?;
        if engine.kind() == EngineKind::Map && engine.policy().is_wildcard_post(self.peer, self.tag)
        {
            return Err(bad_arg(
                "wildcard receives need a queue matching engine; the map engine matches exact keys only",
            ));
        }
        let key = make_match_key(self.peer, self.tag, engine.policy());
        let hold = self.buf.registration().map(|mr| mr.acquire()).transpose()?;
        let post = RecvPost {
            buf: self.buf.clone(),
            comp,
            user_context: self.common.user_context,
            device: dev.inner.clone(),
            _hold: hold,
        };
        let d = &dev.inner;
        d.note_posted();
        match engine.store().insert_recv(key, post) {
            None => Ok(PostResult::Posted),
            Some((SendArrival::Eager { src, tag, data }, post)) => {
                let status = post.land(src, tag, data);
                // Counted as finished either way: a truncation is fatal.
                d.note_completed();
                Ok(PostResult::Done(status?))
            }
            Some((
                SendArrival::Rts {
                    src,
                    tag,
                    total,
                    sender_xfer,
                    device,
                },
                post,
            )) => {
                device.accept_rts(post, src, tag, total, sender_xfer)?;
                Ok(PostResult::Posted)
            }
        }
    }
}

/// Active message: delivered at the target to the completion object
/// registered there under `rcomp`, with no matching.
#[derive(Clone)]
pub struct PostAm {
    ctx: Context,
    peer: Rank,
    buf: BufferDesc,
    rcomp: u32,
    tag: Tag,
    common: Common,
}

pub fn post_am_x(ctx: &Context, peer: Rank, buf: BufferDesc, rcomp: u32) -> PostAm {
    PostAm {
        ctx: ctx.clone(),
        peer,
        buf,
        rcomp,
        tag: Tag(0),
        common: Common::default(),
    }
}

pub fn post_am(ctx: &Context, peer: Rank, buf: BufferDesc, rcomp: u32) -> Result<PostResult> {
    post_am_x(ctx, peer, buf, rcomp).call()
}

impl PostAm {
    common_setters!();

    pub fn tag(mut self, tag: Tag) -> Self {
        self.tag = tag;
        self
    }

    pub fn call(&self) -> Result<PostResult> {
        let ctx = &self.ctx;
        ctx.check_live()?;
        check_peer(ctx, self.peer)?;
        if self.rcomp == 0 {
            return Err(bad_arg("remote completion handle 0 is reserved"));
        }
        if self.tag.is_any() {
            return Err(bad_arg("an active message needs a concrete tag"));
        }
        let dev = self.common.device(ctx)?;
        post_message(
            ctx,
            &dev,
            OpKind::AmSend,
            Opcode::EagerAm,
            self.peer,
            &self.buf,
            self.tag.0,
            self.rcomp,
            0,
            || self.common.comp(ctx),
            self.common.user_context,
        )
    }
}

/// One-sided write of `buf` into the target registration `rkey` at
/// `offset`.
#[derive(Clone)]
pub struct PostPut {
    ctx: Context,
    peer: Rank,
    buf: BufferDesc,
    rkey: u64,
    offset: u64,
    rcomp: u32,
    tag: Tag,
    common: Common,
}

pub fn post_put_x(ctx: &Context, peer: Rank, buf: BufferDesc, rkey: u64, offset: u64) -> PostPut {
    PostPut {
        ctx: ctx.clone(),
        peer,
        buf,
        rkey,
        offset,
        rcomp: 0,
        tag: Tag(0),
        common: Common::default(),
    }
}

pub fn post_put(
    ctx: &Context,
    peer: Rank,
    buf: BufferDesc,
    rkey: u64,
    offset: u64,
) -> Result<PostResult> {
    post_put_x(ctx, peer, buf, rkey, offset).call()
}

impl PostPut {
    common_setters!();

    /// Also signal the target's completion object registered under `rcomp`.
    pub fn rcomp(mut self, rcomp: u32) -> Self {
        self.rcomp = rcomp;
        self
    }

    /// Tag reported to the target's signal.
    pub fn tag(mut self, tag: Tag) -> Self {
        self.tag = tag;
        self
    }

    pub fn call(&self) -> Result<PostResult> {
        let ctx = &self.ctx;
        ctx.check_live()?;
        check_peer(ctx, self.peer)?;
        if self.tag.is_any() {
            return Err(bad_arg("a put needs a concrete tag"));
        }
        let dev = self.common.device(ctx)?;
        let comp = self.common.comp(ctx)?;
        let d = &dev.inner;
        let data = self.buf.outgoing()?;
        let payload = if 16 + data.len() <= d.pool().packet_size() {
            let Some(mut pkt) = d.pool().alloc() else {
                return Ok(PostResult::Retry);
            };
            let out = pkt.buffer_mut();
            out[..8].copy_from_slice(&self.rkey.to_le_bytes());
            out[8..16].copy_from_slice(&self.offset.to_le_bytes());
            out[16..16 + data.len()].copy_from_slice(&data);
            pkt.set_len(16 + data.len());
            Payload::Packet(pkt)
        } else {
            let mut b = BytesMut::with_capacity(16 + data.len());
            b.put_u64_le(self.rkey);
            b.put_u64_le(self.offset);
            b.extend_from_slice(&data);
            Payload::Bytes(b.freeze())
        };
        let hold = self.buf.registration().map(|mr| mr.acquire()).transpose()?;
        let op = PendingOp {
            op: OpKind::Put,
            peer: self.peer.0,
            tag: self.tag.0,
            rcomp: self.rcomp,
            comp,
            user_context: self.common.user_context,
            buffer: self.buf.clone(),
            hold,
        };
        post_one_sided(ctx, &dev, Opcode::Put, op, payload)
    }
}

/// One-sided read of `buf.len()` bytes from the target registration `rkey`
/// at `offset` into `buf`.
#[derive(Clone)]
pub struct PostGet {
    ctx: Context,
    peer: Rank,
    buf: BufferDesc,
    rkey: u64,
    offset: u64,
    rcomp: u32,
    tag: Tag,
    common: Common,
}

pub fn post_get_x(ctx: &Context, peer: Rank, buf: BufferDesc, rkey: u64, offset: u64) -> PostGet {
    PostGet {
        ctx: ctx.clone(),
        peer,
        buf,
        rkey,
        offset,
        rcomp: 0,
        tag: Tag(0),
        common: Common::default(),
    }
}

pub fn post_get(
    ctx: &Context,
    peer: Rank,
    buf: BufferDesc,
    rkey: u64,
    offset: u64,
) -> Result<PostResult> {
    post_get_x(ctx, peer, buf, rkey, offset).call()
}

impl PostGet {
    common_setters!();

    /// Also signal the target's completion object registered under `rcomp`
    /// once the data has been read.
    pub fn rcomp(mut self, rcomp: u32) -> Self {
        self.rcomp = rcomp;
        self
    }

    pub fn tag(mut self, tag: Tag) -> Self {
        self.tag = tag;
        self
    }

    pub fn call(&self) -> Result<PostResult> {
        let ctx = &self.ctx;
        ctx.check_live()?;
        check_peer(ctx, self.peer)?;
        if self.tag.is_any() {
            return Err(bad_arg("a get needs a concrete tag"));
        }
        let dev = self.common.device(ctx)?;
        let comp = self.common.comp(ctx)?;
        let Some(mut pkt) = dev.inner.pool().alloc() else {
            return Ok(PostResult::Retry);
        };
        let out = pkt.buffer_mut();
        out[..8].copy_from_slice(&self.rkey.to_le_bytes());
        out[8..16].copy_from_slice(&self.offset.to_le_bytes());
        out[16..24].copy_from_slice(&(self.buf.len() as u64).to_le_bytes());
        pkt.set_len(24);
        let hold = self.buf.registration().map(|mr| mr.acquire()).transpose()?;
        let op = PendingOp {
            op: OpKind::Get,
            peer: self.peer.0,
            tag: self.tag.0,
            rcomp: self.rcomp,
            comp,
            user_context: self.common.user_context,
            buffer: self.buf.clone(),
            hold,
        };
        post_one_sided(ctx, &dev, Opcode::GetReq, op, Payload::Packet(pkt))
    }
}

fn post_one_sided(
    ctx: &Context,
    dev: &Device,
    opcode: Opcode,
    op: PendingOp,
    payload: Payload,
) -> Result<PostResult> {
    let d = &dev.inner;
    let id = d.next_xfer();
    let mut h = FrameHeader::new(opcode, ctx.rank());
    set_meta(&mut h, op.tag, op.rcomp);
    h.xfer_id = id;
    let peer = op.peer;
    d.insert_pending(id, op);
    d.note_posted();
    if d.push(peer, Frame::new(h, payload))?.is_some() {
        d.remove_pending(id);
        d.unpost();
        return Ok(PostResult::Retry);
    }
    Ok(PostResult::Posted)
}
