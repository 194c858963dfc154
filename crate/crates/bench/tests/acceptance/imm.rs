use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use lci::{decode_imm, encode_imm, IMM_RCOMP_LIMIT, IMM_TAG_LIMIT};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Packing written with arithmetic instead of shifts and masks.
fn oracle_encode(tag16: u32, rcomp: u32, kind: u32) -> u32 {
    kind * 2_147_483_648 + rcomp * 65_536 + tag16
}

fn oracle_decode(raw: u32) -> (u32, u32, u32) {
    (raw % 65_536, (raw / 65_536) % 32_768, raw / 2_147_483_648)
}

pub fn bit_packing() -> Result<String> {
    let start = Instant::now();
    for (raw, fields) in [
        (0x0000_0000, (0, 0, 0)),
        (0xFFFF_FFFF, (0xFFFF, 0x7FFF, 1)),
        (0x8003_0005, (5, 3, 1)),
    ] {
        ensure!(decode_imm(raw) == fields, "decode {raw:#010x}");
        ensure!(
            encode_imm(fields.0, fields.1, fields.2)?.raw() == raw,
            "encode {fields:?}"
        );
    }

    let tags = [0, 1, 2, 0x7FFF, 0x8000, 0xFFFE, 0xFFFF];
    let rcomps = [0, 1, 2, 0x3FFF, 0x4000, 0x7FFE, 0x7FFF];
    let mut boundary = 0;
    for &t in &tags {
        for &r in &rcomps {
            for k in 0..2 {
                let raw = encode_imm(t, r, k)?.raw();
                ensure!(raw == oracle_encode(t, r, k), "encode ({t}, {r}, {k})");
                ensure!(decode_imm(raw) == (t, r, k), "decode {raw:#010x}");
                boundary += 1;
            }
        }
        ensure!(
            encode_imm(t, IMM_RCOMP_LIMIT, 0).is_err(),
            "rcomp limit accepted"
        );
    }
    ensure!(
        encode_imm(IMM_TAG_LIMIT as u32, 0, 0).is_err(),
        "tag limit accepted"
    );
    ensure!(encode_imm(0, 0, 2).is_err(), "kind 2 accepted");

    let mut rng = StdRng::seed_from_u64(0x1ce);
    let mut mismatches = 0u32;
    for _ in 0..1_000_000 {
        let (t, r, k) = (
            rng.random_range(0..65_536),
            rng.random_range(0..32_768),
            rng.random_range(0..2),
        );
        let raw = encode_imm(t, r, k)?.raw();
        mismatches += u32::from(raw != oracle_encode(t, r, k) || decode_imm(raw) != (t, r, k));
        let word: u32 = rng.random();
        let (t, r, k) = decode_imm(word);
        mismatches +=
            u32::from((t, r, k) != oracle_decode(word) || encode_imm(t, r, k)?.raw() != word);
    }
    ensure!(mismatches == 0, "{mismatches} mismatches");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!(
        "3 worked examples, {boundary} boundary triples, 2x10^6 random round trips, 0 mismatches"
    ))
}
