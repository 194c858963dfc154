//! Value types shared by every module: ranks, tags, immediate-data packing,
//! match keys and completion records.

use std::fmt;
use std::sync::Arc;

use bytes::Bytes;

use crate::error::{bad_arg, ErrorCode, Result};
use crate::memory::MemoryRegistration;

/// Index of a process (or loopback virtual endpoint) in the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rank(pub u32);

impl Rank {
    /// Wildcard, only meaningful inside match keys and receive posts.
    pub const ANY: Rank = Rank(u32::MAX);

    pub fn is_any(self) -> bool {
        self == Rank::ANY
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_any() {
            f.write_str("ANY")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl From<u32> for Rank {
    fn from(v: u32) -> Self {
        Rank(v)
    }
}

/// Message tag. The full 64-bit range travels on the payload-metadata path;
/// the immediate-data path carries only the low 16 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Tag(pub u64);

impl Tag {
    pub const ANY: Tag = Tag(u64::MAX);

    pub fn is_any(self) -> bool {
        self == Tag::ANY
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_any() {
            f.write_str("ANY")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl From<u64> for Tag {
    fn from(v: u64) -> Self {
        Tag(v)
    }
}

/// Exclusive upper bound for tags carried in immediate data.
pub const IMM_TAG_LIMIT: u64 = 1 << 16;
/// Exclusive upper bound for remote-completion handles carried in immediate data.
pub const IMM_RCOMP_LIMIT: u32 = 1 << 15;

/// 32-bit immediate word: `kind` in bit 31, `rcomp` in bits 30..16, `tag16`
/// in bits 15..0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ImmData(pub u32);

impl ImmData {
    pub fn encode(tag16: u32, rcomp: u32, kind: u32) -> Result<ImmData> {
        if u64::from(tag16) >= IMM_TAG_LIMIT {
            return Err(bad_arg(format!("tag {tag16} does not fit 16 bits")));
        }
        if rcomp >= IMM_RCOMP_LIMIT {
            return Err(bad_arg(format!("rcomp {rcomp} does not fit 15 bits")));
        }
        if kind > 1 {
            return Err(bad_arg(format!("kind {kind} does not fit 1 bit")));
        }
        Ok(ImmData((kind << 31) | (rcomp << 16) | tag16))
    }

    pub fn raw(self) -> u32 {
        self.0
    }

    pub fn tag16(self) -> u32 {
        self.0 & 0xFFFF
    }

    pub fn rcomp(self) -> u32 {
        (self.0 >> 16) & 0x7FFF
    }

    pub fn kind(self) -> u32 {
        self.0 >> 31
    }

    /// Splits the word back into `(tag16, rcomp, kind)`.
    pub fn decode(self) -> (u32, u32, u32) {
        (self.tag16(), self.rcomp(), self.kind())
    }
}

pub fn encode_imm(tag16: u32, rcomp: u32, kind: u32) -> Result<ImmData> {
    ImmData::encode(tag16, rcomp, kind)
}

pub fn decode_imm(raw: u32) -> (u32, u32, u32) {
    ImmData(raw).decode()
}

/// Composite key under which sends and receives meet in a matching engine.
/// Either component may be a wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatchKey {
    pub rank: u32,
    pub tag: u64,
}

impl MatchKey {
    pub const ANY_RANK: u32 = u32::MAX;
    pub const ANY_TAG: u64 = u64::MAX;
    pub const WILDCARD: MatchKey = MatchKey {
        rank: Self::ANY_RANK,
        tag: Self::ANY_TAG,
    };

    pub fn new(rank: u32, tag: u64) -> Self {
        MatchKey { rank, tag }
    }

    pub fn rank_is_any(&self) -> bool {
        self.rank == Self::ANY_RANK
    }

    pub fn tag_is_any(&self) -> bool {
        self.tag == Self::ANY_TAG
    }

    pub fn has_wildcard(&self) -> bool {
        self.rank_is_any() || self.tag_is_any()
    }

    /// Componentwise equal-or-wildcard.
    pub fn compatible(&self, other: &MatchKey) -> bool {
        (self.rank == other.rank || self.rank_is_any() || other.rank_is_any())
            && (self.tag == other.tag || self.tag_is_any() || other.tag_is_any())
    }
}

pub type KeyFn = Arc<dyn Fn(Rank, Tag) -> MatchKey + Send + Sync>;

/// How a matching engine derives keys from `(rank, tag)`.
#[derive(Clone)]
pub enum MatchPolicy {
    None,
    RankOnly,
    TagOnly,
    RankTag,
    Custom(KeyFn),
}

impl MatchPolicy {
    pub fn custom(f: impl Fn(Rank, Tag) -> MatchKey + Send + Sync + 'static) -> Self {
        MatchPolicy::Custom(Arc::new(f))
    }

    pub fn name(&self) -> &'static str {
        match self {
            MatchPolicy::None => "none",
            MatchPolicy::RankOnly => "rank_only",
            MatchPolicy::TagOnly => "tag_only",
            MatchPolicy::RankTag => "rank_tag",
            MatchPolicy::Custom(_) => "custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "none" => MatchPolicy::None,
            "rank_only" => MatchPolicy::RankOnly,
            "tag_only" => MatchPolicy::TagOnly,
            "rank_tag" => MatchPolicy::RankTag,
            other => return Err(bad_arg(format!("unknown match policy {other:?}"))),
        })
    }

    /// Whether a receive with these wildcard components would need a
    /// non-exact lookup under this policy.
    pub(crate) fn is_wildcard_post(&self, rank: Rank, tag: Tag) -> bool {
        match self {
            MatchPolicy::None => false,
            MatchPolicy::RankOnly => rank.is_any(),
            MatchPolicy::TagOnly => tag.is_any(),
            MatchPolicy::RankTag => rank.is_any() || tag.is_any(),
            MatchPolicy::Custom(f) => f(rank, tag).has_wildcard(),
        }
    }
}

impl fmt::Debug for MatchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn make_match_key(rank: Rank, tag: Tag, policy: &MatchPolicy) -> MatchKey {
    match policy {
        MatchPolicy::None => MatchKey::WILDCARD,
        MatchPolicy::RankOnly => MatchKey::new(rank.0, MatchKey::ANY_TAG),
        MatchPolicy::TagOnly => MatchKey::new(MatchKey::ANY_RANK, tag.0),
        MatchPolicy::RankTag => MatchKey::new(rank.0, tag.0),
        MatchPolicy::Custom(f) => f(rank, tag),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Send,
    Recv,
    AmSend,
    AmRecv,
    Put,
    Get,
    /// Target side of a put carrying a remote completion handle.
    PutSignal,
    /// Target side of a get carrying a remote completion handle.
    GetSignal,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Send => "send",
            OpKind::Recv => "recv",
            OpKind::AmSend => "am_send",
            OpKind::AmRecv => "am_recv",
            OpKind::Put => "put",
            OpKind::Get => "get",
            OpKind::PutSignal => "put_signal",
            OpKind::GetSignal => "get_signal",
        }
    }
}

/// A message buffer handed to or returned from an operation.
///
/// Outgoing buffers carry their bytes. Receive and get buffers are created
/// with [`BufferDesc::with_capacity`]; the completed status returns a
/// descriptor holding the bytes that arrived. A descriptor may also name a
/// window `[offset, offset + length)` of a [`MemoryRegistration`]: sends and
/// puts then read from it and receives and gets write into it.
#[derive(Clone, Debug, Default)]
pub struct BufferDesc {
    data: Bytes,
    length: usize,
    registration: Option<(MemoryRegistration, usize)>,
}

impl BufferDesc {
    pub fn from_bytes(data: impl Into<Bytes>) -> Self {
        let data = data.into();
        BufferDesc {
            length: data.len(),
            data,
            registration: None,
        }
    }

    pub fn with_capacity(length: usize) -> Self {
        BufferDesc {
            data: Bytes::new(),
            length,
            registration: None,
        }
    }

    /// Describes `length` bytes at `offset` within a registration.
    pub fn registered(mr: &MemoryRegistration, offset: usize, length: usize) -> Result<Self> {
        if offset.checked_add(length).is_none_or(|end| end > mr.len()) {
            return Err(bad_arg(format!(
                "window [{offset}, +{length}) exceeds a {}-byte registration",
                mr.len()
            )));
        }
        Ok(BufferDesc {
            data: Bytes::new(),
            length,
            registration: Some((mr.clone(), offset)),
        })
    }

    pub(crate) fn landed(data: Bytes, registration: Option<(MemoryRegistration, usize)>) -> Self {
        BufferDesc {
            length: data.len(),
            data,
            registration,
        }
    }

    pub fn data(&self) -> &Bytes {
        &self.data
    }

    pub fn into_data(self) -> Bytes {
        self.data
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn registration(&self) -> Option<&MemoryRegistration> {
        self.registration.as_ref().map(|(mr, _)| mr)
    }

    pub fn registration_offset(&self) -> Option<usize> {
        self.registration.as_ref().map(|(_, off)| *off)
    }

    pub(crate) fn registration_window(&self) -> Option<(MemoryRegistration, usize)> {
        self.registration.clone()
    }

    /// Bytes to transmit: the registered window when present, else the
    /// carried data.
    pub(crate) fn outgoing(&self) -> Result<Bytes> {
        match &self.registration {
            Some((mr, off)) => Ok(Bytes::from(mr.read(*off, self.length)?)),
            None => Ok(self.data.clone()),
        }
    }
}

/// Completion record for one operation.
#[derive(Clone, Debug)]
pub struct Status {
    pub op: OpKind,
    pub peer: Rank,
    pub tag: Tag,
    pub buffer: BufferDesc,
    pub user_context: u64,
    /// Remote completion handle the operation carried, 0 when none.
    pub rcomp: u32,
    pub error: ErrorCode,
}

impl Status {
    pub(crate) fn new(
        op: OpKind,
        peer: Rank,
        tag: Tag,
        buffer: BufferDesc,
        user_context: u64,
    ) -> Self {
        Status {
            op,
            peer,
            tag,
            buffer,
            user_context,
            rcomp: 0,
            error: ErrorCode::Ok,
        }
    }

    pub(crate) fn with_rcomp(mut self, rcomp: u32) -> Self {
        self.rcomp = rcomp;
        self
    }
}
