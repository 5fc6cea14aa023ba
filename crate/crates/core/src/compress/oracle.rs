//! Size-oracle backend for traces that annotate compressibility instead of
//! carrying data.
//!
//! Annotated pages are synthesized as tagged filler blocks. A filler block
//! is `"SZOR"`, the target compressed size (`u16`), a seed (`u64`), then a
//! SplitMix64 byte stream. Compressing a run of such blocks (or all-zero
//! blocks) yields a descriptor padded to the sum of the targets, so the
//! compressed size is exactly what the trace asked for and decompression is
//! still bit-exact. Anything else does not compress.

use crate::error::CodecError;

const MAGIC: &[u8; 4] = b"SZOR";
const PART: usize = 1024;
const HEADER: usize = 14;
const DESC: usize = 11;
pub const MIN_TARGET: u16 = 12;

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

pub fn filler_block(target: u16, seed: u64) -> [u8; PART] {
    let target = target.clamp(MIN_TARGET, PART as u16);
    let mut b = [0u8; PART];
    b[..4].copy_from_slice(MAGIC);
    b[4..6].copy_from_slice(&target.to_le_bytes());
    b[6..14].copy_from_slice(&seed.to_le_bytes());
    let mut rng = SplitMix64(seed);
    for chunk in b[HEADER..].chunks_mut(8) {
        let w = rng.next().to_le_bytes();
        chunk.copy_from_slice(&w[..chunk.len()]);
    }
    b
}

/// `(kind, target, seed)`: kind 0 is an all-zero part, 1 a filler part.
fn describe(part: &[u8]) -> Option<(u8, u16, u64)> {
    if part.iter().all(|&b| b == 0) {
        return Some((0, 0, 0));
    }
    if &part[..4] != MAGIC {
        return None;
    }
    let target = u16::from_le_bytes([part[4], part[5]]);
    let seed = u64::from_le_bytes(part[6..14].try_into().unwrap());
    (part == filler_block(target, seed)).then_some((1, target, seed))
}

pub fn compress(input: &[u8]) -> Vec<u8> {
    if input.is_empty() || input.len() % PART != 0 || input.len() / PART > 255 {
        return input.to_vec();
    }
    let mut descs = Vec::new();
    for part in input.chunks(PART) {
        match describe(part) {
            Some(d) => descs.push(d),
            None => return input.to_vec(),
        }
    }
    let mut out = vec![descs.len() as u8];
    for &(kind, target, seed) in &descs {
        out.push(kind);
        out.extend_from_slice(&target.to_le_bytes());
        out.extend_from_slice(&seed.to_le_bytes());
    }
    let padded: usize = descs.iter().map(|d| usize::from(d.1)).sum();
    if out.len() < padded {
        out.resize(padded, 0);
    }
    if out.len() >= input.len() {
        return input.to_vec();
    }
    out
}

pub fn decompress(stream: &[u8], original_len: usize) -> Result<Vec<u8>, CodecError> {
    let bad = |m: &str| CodecError::Malformed(format!("size-oracle: {m}"));
    let &n = stream.first().ok_or_else(|| bad("empty stream"))?;
    let n = usize::from(n);
    if n * PART != original_len || stream.len() < 1 + n * DESC {
        return Err(bad("descriptor count does not match the original length"));
    }
    let mut out = Vec::with_capacity(original_len);
    for i in 0..n {
        let d = &stream[1 + i * DESC..1 + (i + 1) * DESC];
        let target = u16::from_le_bytes([d[1], d[2]]);
        let seed = u64::from_le_bytes(d[3..11].try_into().unwrap());
        match d[0] {
            0 => out.extend_from_slice(&[0u8; PART]),
            1 => out.extend_from_slice(&filler_block(target, seed)),
            k => return Err(bad(&format!("unknown part kind {k}"))),
        }
    }
    Ok(out)
}
