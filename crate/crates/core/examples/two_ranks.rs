//! Two loopback ranks: a tagged send/recv, then an active message.

use lci::*;

fn main() -> Result<()> {
    let rt = runtime_init_x()
        .attr("transport", "loopback")
        .attr("nranks", 2)
        .call()?;
    let (a, b) = (rt.context(0)?, rt.context(1)?);

    let done = Synchronizer::new(1)?;
    let r = post_recv_x(&b, Rank(0), BufferDesc::with_capacity(5), Tag(7))
        .comp(&done)
        .call()?;
    assert!(r.is_posted());
    while post_send(&a, Rank(1), BufferDesc::from_bytes(&b"hello"[..]), Tag(7))?.is_retry() {
        rt.progress_all()?;
    }
    let got = done.wait_with(|| {
        rt.progress_all().expect("progress");
    });
    println!("recv: {:?}", got[0].buffer.data());

    let inbox = b.alloc_cq()?;
    let handle = b.register_rcomp(&inbox, RcompPath::Imm)?;
    while post_am(&a, Rank(1), BufferDesc::from_bytes(&b"ping"[..]), handle)?.is_retry() {
        rt.progress_all()?;
    }
    let am = loop {
        rt.progress_all()?;
        if let Some(s) = inbox.pop() {
            break s;
        }
    };
    println!("am: {:?} from rank {}", am.buffer.data(), am.peer);

    rt.finalize()
}
