//! A lightweight point-to-point communication library.
//!
//! Ranks exchange two-sided messages (send/receive matched by rank and tag),
//! active messages delivered straight to a completion object, and one-sided
//! put/get on registered memory. All of it runs over explicit progress:
//! nothing moves until a thread calls [`Device::progress`] (or
//! [`Context::progress`]), and posting never blocks. A post that cannot get
//! a packet or queue slot returns [`PostResult::Retry`] without side
//! effects.
//!
//! Two transports are built in. `loopback` hosts every rank of the world in
//! one process and is what the tests use; `tcp` runs one rank per process.
//!
//! Completion is signaled through any [`CompletionObject`]: a bounded
//! [`CompletionQueue`], a counting [`Synchronizer`] or an inline
//! [`Handler`].

pub mod attr;
pub mod completion;
pub mod conformance;
pub mod error;
pub mod frame;
pub mod matching;
pub mod memory;
pub mod ops;
pub mod packet_pool;
pub mod rcomp;
pub mod runtime;
pub mod transport;
pub mod types;

pub use attr::{attribute_names, env_var, AttrSet, AttrValue, EnvSource, Scope};
pub use completion::{Comp, CompKind, CompletionObject, CompletionQueue, Handler, Synchronizer};
pub use error::{Error, ErrorCode, Result};
pub use frame::{Frame, FrameDecoder, FrameHeader, Opcode, Payload, HEADER_LEN};
pub use matching::{EngineKind, EngineStore, Entry, MapStore, MatchingEngine, QueueStore};
pub use memory::{MemoryRegistration, Region};
pub use ops::{
    post_am, post_am_x, post_get, post_get_x, post_put, post_put_x, post_recv, post_recv_x,
    post_send, post_send_x, PostAm, PostGet, PostPut, PostRecv, PostResult, PostSend,
};
pub use packet_pool::{Packet, PacketPool, RawPacket};
pub use rcomp::RcompPath;
pub use runtime::{
    runtime_init, runtime_init_x, test_lock, AllocCq, AllocDevice, AllocMatchingEngine,
    AllocPacketPool, AllocSync, Census, Context, Runtime, RuntimeInit,
};
pub use transport::{Device, FrameSend, TransportKind};
pub use types::{
    decode_imm, encode_imm, make_match_key, BufferDesc, ImmData, KeyFn, MatchKey, MatchPolicy,
    OpKind, Rank, Status, Tag, IMM_RCOMP_LIMIT, IMM_TAG_LIMIT,
};
