//! Greedy hash-chain LZ77 over a 64KB window.
//!
//! Token stream:
//! * `0x00..=0x7f`: literal run of `b + 1` bytes follows (1..=128).
//! * `0x80..=0xff`: match of length `(b & 0x7f) + 3` (3..=130) at the
//!   little-endian `u16` distance that follows (1..=65535).
//!
//! Decoding stops once `original_len` bytes are produced, so trailing
//! padding after the stream is ignored.

use crate::error::CodecError;

const MIN_MATCH: usize = 3;
const MAX_MATCH: usize = 130;
const MAX_LITERALS: usize = 128;
const WINDOW: usize = u16::MAX as usize;
const HASH_BITS: u32 = 12;
const MAX_CHAIN: usize = 32;

fn hash3(b: &[u8]) -> usize {
    let v = u32::from(b[0]) | u32::from(b[1]) << 8 | u32::from(b[2]) << 16;
    (v.wrapping_mul(2_654_435_761) >> (32 - HASH_BITS)) as usize
}

fn flush_literals(out: &mut Vec<u8>, lits: &[u8]) {
    for run in lits.chunks(MAX_LITERALS) {
        out.push((run.len() - 1) as u8);
        out.extend_from_slice(run);
    }
}

pub fn compress(input: &[u8]) -> Vec<u8> {
    let n = input.len();
    let mut out = Vec::with_capacity(n / 2 + 8);
    let mut head = vec![usize::MAX; 1 << HASH_BITS];
    let mut prev = vec![usize::MAX; n];
    let mut lit_start = 0;
    let mut i = 0;

    let insert = |head: &mut Vec<usize>, prev: &mut Vec<usize>, pos: usize| {
        if pos + MIN_MATCH <= n {
            let h = hash3(&input[pos..]);
            prev[pos] = head[h];
            head[h] = pos;
        }
    };

    while i < n {
        let mut best_len = 0;
        let mut best_dist = 0;
        if i + MIN_MATCH <= n {
            let mut cand = head[hash3(&input[i..])];
            let mut steps = 0;
            while cand != usize::MAX && i - cand <= WINDOW && steps < MAX_CHAIN {
                let limit = MAX_MATCH.min(n - i);
                let len = (0..limit).take_while(|&k| input[cand + k] == input[i + k]).count();
                if len > best_len {
                    best_len = len;
                    best_dist = i - cand;
                    if len == limit {
                        break;
                    }
                }
                cand = prev[cand];
                steps += 1;
            }
        }
        if best_len >= MIN_MATCH {
            flush_literals(&mut out, &input[lit_start..i]);
            out.push(0x80 | (best_len - MIN_MATCH) as u8);
            out.extend_from_slice(&(best_dist as u16).to_le_bytes());
            for p in i..i + best_len {
                insert(&mut head, &mut prev, p);
            }
            i += best_len;
            lit_start = i;
        } else {
            insert(&mut head, &mut prev, i);
            i += 1;
        }
    }
    flush_literals(&mut out, &input[lit_start..]);
    out
}

pub fn decompress(stream: &[u8], original_len: usize) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(original_len);
    let mut i = 0;
    let bad = |m: &str| CodecError::Malformed(format!("lz77: {m}"));
    while out.len() < original_len {
        let &b = stream.get(i).ok_or_else(|| bad("stream ends early"))?;
        i += 1;
        if b < 0x80 {
            let len = usize::from(b) + 1;
            let lits = stream.get(i..i + len).ok_or_else(|| bad("literal run overruns stream"))?;
            out.extend_from_slice(lits);
            i += len;
        } else {
            let len = usize::from(b & 0x7f) + MIN_MATCH;
            let d = stream.get(i..i + 2).ok_or_else(|| bad("match truncated"))?;
            let dist = usize::from(u16::from_le_bytes([d[0], d[1]]));
            i += 2;
            if dist == 0 || dist > out.len() {
                return Err(bad("match distance out of range"));
            }
            let from = out.len() - dist;
            for k in 0..len {
                out.push(out[from + k]);
            }
        }
    }
    if out.len() != original_len {
        return Err(bad("output overruns the original length"));
    }
    Ok(out)
}
