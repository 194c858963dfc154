use std::process::Command;

use anyhow::{ensure, Context as _, Result};
use bytes::Bytes;
use lci::{encode_imm, Frame, FrameDecoder, FrameHeader, Opcode, Payload};

use crate::common::free_port_base;

const GOLDEN: &str = "4C 43 49 32 01 01 00 00 00 00 00 00 08 00 00 00 05 00 00 00 00 00 00 00 \
                      05 00 03 80 00 00 00 00 00 00 00 00 00 00 00 00 41 42 43 44 45 46 47 48";

fn conformance(args: &[&str]) -> Result<Vec<String>> {
    let out = Command::new(env!("CARGO_BIN_EXE_lci-conformance"))
        .args(args)
        .output()
        .context("running lci-conformance")?;
    ensure!(
        out.status.success(),
        "lci-conformance {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?
        .lines()
        .map(String::from)
        .collect())
}

pub fn equivalence() -> Result<String> {
    let loopback = conformance(&[])?;
    let port = free_port_base().to_string();
    let tcp = conformance(&["--transport", "tcp", "--port-base", &port])?;
    ensure!(!loopback.is_empty(), "the suite observed nothing");
    if let Some((l, t)) = loopback.iter().zip(&tcp).find(|(l, t)| l != t) {
        anyhow::bail!("first difference: loopback {l:?} vs tcp {t:?}");
    }
    ensure!(
        loopback.len() == tcp.len(),
        "{} loopback observations vs {} over tcp",
        loopback.len(),
        tcp.len()
    );
    let failed_check = |l: &&String| {
        l.split_whitespace().any(|f| {
            f.ends_with("=false") && !f.starts_with("immediate=") && !f.starts_with("registered=")
        })
    };
    if let Some(bad) = loopback.iter().find(failed_check) {
        anyhow::bail!("suite check failed: {bad}");
    }
    let scenarios = loopback
        .iter()
        .filter_map(|l| l.split('\t').next())
        .collect::<std::collections::BTreeSet<_>>();
    Ok(format!(
        "{} observations across {} scenarios identical over loopback and 2-process tcp",
        loopback.len(),
        scenarios.len()
    ))
}

pub fn golden_vector() -> Result<String> {
    let golden: Vec<u8> = GOLDEN
        .split_whitespace()
        .map(|b| u8::from_str_radix(b, 16))
        .collect::<Result<_, _>>()?;
    let mut h = FrameHeader::new(Opcode::EagerSend, 0);
    h.tag = 5;
    h.imm = encode_imm(5, 3, 1)?.raw();
    let frame = Frame::new(h, Payload::Bytes(Bytes::from_static(b"ABCDEFGH")));
    let bytes = frame.to_vec();
    ensure!(bytes.len() == 48, "encoded {} bytes", bytes.len());
    ensure!(bytes == golden, "encoding differs from the golden vector");
    let mut dec = FrameDecoder::new();
    dec.extend(&golden);
    let back = dec.next_frame()?.context("golden vector did not decode")?;
    ensure!(back.header == frame.header, "decoded header differs");
    ensure!(&*back.payload == b"ABCDEFGH", "decoded payload differs");
    Ok("48-byte EAGER_SEND frame encodes and decodes bit-for-bit".into())
}
