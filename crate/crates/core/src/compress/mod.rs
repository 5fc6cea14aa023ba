//! Block compression backends, zero detection, co-location packing and the
//! compression latency model.

pub mod lz77;
pub mod oracle;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{BLOCK_SIZE, CHUNK_SIZE, PAGE_SIZE};
use crate::error::CodecError;
use crate::metadata::{aligned_block_size, encode_block_sz, required_chunks, BlockState, PageType, MAX_COMPRESSED_PAGE};

const PAGE: usize = PAGE_SIZE as usize;
const BLOCK: usize = BLOCK_SIZE as usize;
const CHUNK: usize = CHUNK_SIZE as usize;

/// A lossless block compressor. A returned stream that is not shorter than
/// the input is the input itself, stored raw.
pub trait Compressor: Send + Sync {
    fn name(&self) -> &'static str;
    fn compress(&self, data: &[u8]) -> Vec<u8>;
    /// `stream` may carry trailing padding.
    fn decompress(&self, stream: &[u8], original_len: usize) -> Result<Vec<u8>, CodecError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Lz77,
    SizeOracle,
}

impl BackendKind {
    pub fn build(self) -> Box<dyn Compressor> {
        match self {
            BackendKind::Lz77 => Box::new(Lz77),
            BackendKind::SizeOracle => Box::new(SizeOracle),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Lz77 => "lz77",
            BackendKind::SizeOracle => "size-oracle",
        }
    }
}

fn raw_or(stream: &[u8], original_len: usize, f: impl FnOnce() -> Result<Vec<u8>, CodecError>) -> Result<Vec<u8>, CodecError> {
    if stream.len() == original_len {
        Ok(stream.to_vec())
    } else {
        f()
    }
}

pub struct Lz77;

impl Compressor for Lz77 {
    fn name(&self) -> &'static str {
        "lz77"
    }

    fn compress(&self, data: &[u8]) -> Vec<u8> {
        let c = lz77::compress(data);
        if c.len() >= data.len() {
            data.to_vec()
        } else {
            c
        }
    }

    fn decompress(&self, stream: &[u8], original_len: usize) -> Result<Vec<u8>, CodecError> {
        raw_or(stream, original_len, || lz77::decompress(stream, original_len))
    }
}

pub struct SizeOracle;

impl Compressor for SizeOracle {
    fn name(&self) -> &'static str {
        "size-oracle"
    }

    fn compress(&self, data: &[u8]) -> Vec<u8> {
        oracle::compress(data)
    }

    fn decompress(&self, stream: &[u8], original_len: usize) -> Result<Vec<u8>, CodecError> {
        raw_or(stream, original_len, || oracle::decompress(stream, original_len))
    }
}

/// Synthesizes a page whose blocks compress to roughly `1024 / ratio` bytes
/// under `kind`. Size-oracle pages hit the target exactly.
pub fn synthesize_page(kind: BackendKind, ratio: f64, seed: u64) -> Vec<u8> {
    let target = if ratio <= 1.0 { BLOCK } else { ((BLOCK as f64 / ratio).round() as usize).clamp(1, BLOCK) };
    let mut page = Vec::with_capacity(PAGE);
    for b in 0..4u64 {
        let block_seed = seed.wrapping_mul(4).wrapping_add(b);
        match kind {
            BackendKind::SizeOracle => page.extend_from_slice(&oracle::filler_block(target as u16, block_seed)),
            BackendKind::Lz77 => {
                let mut rng = ChaCha8Rng::seed_from_u64(block_seed);
                let mut blk = [0u8; BLOCK];
                // Random bytes are incompressible; zeros cost almost nothing.
                rng.fill(&mut blk[..target]);
                page.extend_from_slice(&blk);
            }
        }
    }
    page
}

/// Cycle-level compression/decompression cost, defined per KiB so the
/// defaults (256 and 64) read like the hardware throughputs of 4 and 16
/// bytes per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub compress_cycles_per_kib: u64,
    pub decompress_cycles_per_kib: u64,
    pub cycle_ps: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { compress_cycles_per_kib: 256, decompress_cycles_per_kib: 64, cycle_ps: 500 }
    }
}

impl LatencyModel {
    pub fn compress_cycles(&self, bytes: usize) -> u64 {
        (bytes as u64 * self.compress_cycles_per_kib).div_ceil(1024)
    }

    pub fn decompress_cycles(&self, bytes: usize) -> u64 {
        (bytes as u64 * self.decompress_cycles_per_kib).div_ceil(1024)
    }

    pub fn compress_ps(&self, bytes: usize) -> u64 {
        self.compress_cycles(bytes) * self.cycle_ps
    }

    pub fn decompress_ps(&self, bytes: usize) -> u64 {
        self.decompress_cycles(bytes) * self.cycle_ps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionMode {
    /// Whole 4KB page compressed as one stream.
    Page4k,
    /// Four independently compressed 1KB blocks packed into shared chunks.
    Colocated1k,
}

impl CompressionMode {
    pub fn name(self) -> &'static str {
        match self {
            CompressionMode::Page4k => "page4k",
            CompressionMode::Colocated1k => "colocated1k",
        }
    }

    /// Bytes decompressed (or compressed) per promotion unit.
    pub fn unit_bytes(self) -> usize {
        match self {
            CompressionMode::Page4k => PAGE,
            CompressionMode::Colocated1k => BLOCK,
        }
    }
}

/// Where each chunk-resident block sits inside the packed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PackedPageLayout {
    /// `(start_offset, aligned_size)` for blocks stored in chunks.
    pub slots: [Option<(usize, usize)>; 4],
    pub chunk_count: usize,
}

impl PackedPageLayout {
    /// Rebuilds offsets from block types and size codes alone. Promoted
    /// blocks keep their slot while the page still owns its C-chunks.
    pub fn from_blocks(blocks: &[BlockState; 4], has_chunks: bool) -> Self {
        let mut l = PackedPageLayout::default();
        let mut off = 0;
        for (i, b) in blocks.iter().enumerate() {
            let stored = match b.kind {
                PageType::Compressed | PageType::Incompressible => true,
                PageType::Promoted => has_chunks,
                PageType::Zero => false,
            };
            if stored {
                let size = aligned_block_size(b.size_code);
                l.slots[i] = Some((off, size));
                off += size;
            }
        }
        l.chunk_count = off.div_ceil(CHUNK);
        l
    }

    /// Layout for either mode. In page4k mode every block maps to the whole
    /// stream, since the page decompresses as one unit.
    pub fn for_entry(mode: CompressionMode, blocks: &[BlockState; 4], chunk_count: usize) -> Self {
        match mode {
            CompressionMode::Page4k => {
                let slot = (chunk_count > 0).then_some((0, chunk_count * CHUNK));
                PackedPageLayout { slots: [slot; 4], chunk_count }
            }
            CompressionMode::Colocated1k => Self::from_blocks(blocks, chunk_count > 0),
        }
    }

    /// Chunk ordinals covering block `i`; empty for blocks not in chunks.
    pub fn blocks_to_fetch(&self, i: usize) -> Range<usize> {
        match self.slots[i] {
            Some((off, size)) => off / CHUNK..(off + size).div_ceil(CHUNK),
            None => 0..0,
        }
    }
}

/// Outcome of compressing one 1KB block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockPayload {
    Zero,
    Compressed(Vec<u8>),
    Raw,
}

pub fn classify_block(block: &[u8], backend: &dyn Compressor) -> BlockPayload {
    if block.iter().all(|&b| b == 0) {
        return BlockPayload::Zero;
    }
    let c = backend.compress(block);
    // A 7-code block is as large as the raw one; keep it raw.
    if c.len() >= BLOCK || encode_block_sz(c.len()).map_or(true, |s| s == 7) {
        BlockPayload::Raw
    } else {
        BlockPayload::Compressed(c)
    }
}

/// A page ready to be written to C-chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPage {
    pub blocks: [BlockState; 4],
    /// Chunk image in ordinal order, `chunk_count * 512` bytes.
    pub image: Vec<u8>,
    pub chunk_count: usize,
    /// Compressed bytes before alignment (histogram input).
    pub compressed_bytes: usize,
}

impl PackedPage {
    pub fn is_zero(&self) -> bool {
        self.chunk_count == 0
    }

    pub fn layout(&self, mode: CompressionMode) -> PackedPageLayout {
        PackedPageLayout::for_entry(mode, &self.blocks, self.chunk_count)
    }
}

fn raw_page(page: &[u8], mode: CompressionMode) -> PackedPage {
    let code = match mode {
        CompressionMode::Page4k => 0,
        CompressionMode::Colocated1k => 7,
    };
    PackedPage {
        blocks: [BlockState { kind: PageType::Incompressible, size_code: code }; 4],
        image: page.to_vec(),
        chunk_count: 8,
        compressed_bytes: PAGE,
    }
}

/// Packs per-block payloads in block order. Falls back to an all-raw page
/// when the packed stream would need eight chunks.
pub fn pack_colocated(page: &[u8], parts: [BlockPayload; 4]) -> PackedPage {
    let mut blocks = [BlockState::default(); 4];
    let mut image = Vec::with_capacity(PAGE);
    let mut compressed_bytes = 0;
    for (i, p) in parts.iter().enumerate() {
        match p {
            BlockPayload::Zero => {}
            BlockPayload::Compressed(c) => {
                let s = encode_block_sz(c.len()).expect("compressed block below 1KB");
                blocks[i] = BlockState { kind: PageType::Compressed, size_code: s };
                image.extend_from_slice(c);
                image.resize(image.len() + aligned_block_size(s) - c.len(), 0);
                compressed_bytes += c.len();
            }
            BlockPayload::Raw => {
                blocks[i] = BlockState { kind: PageType::Incompressible, size_code: 7 };
                image.extend_from_slice(&page[i * BLOCK..(i + 1) * BLOCK]);
                compressed_bytes += BLOCK;
            }
        }
    }
    if image.len() > MAX_COMPRESSED_PAGE {
        return raw_page(page, CompressionMode::Colocated1k);
    }
    let chunk_count = image.len().div_ceil(CHUNK);
    image.resize(chunk_count * CHUNK, 0);
    PackedPage { blocks, image, chunk_count, compressed_bytes }
}

pub fn classify_and_compress(page: &[u8], mode: CompressionMode, backend: &dyn Compressor) -> PackedPage {
    assert_eq!(page.len(), PAGE, "pages are 4KB");
    match mode {
        CompressionMode::Page4k => {
            if page.iter().all(|&b| b == 0) {
                return PackedPage {
                    blocks: [BlockState::default(); 4],
                    image: Vec::new(),
                    chunk_count: 0,
                    compressed_bytes: 0,
                };
            }
            let c = backend.compress(page);
            match required_chunks(c.len()) {
                Ok((n, PageType::Compressed)) => {
                    let mut image = c.clone();
                    image.resize(usize::from(n) * CHUNK, 0);
                    PackedPage {
                        blocks: [BlockState { kind: PageType::Compressed, size_code: 0 }; 4],
                        image,
                        chunk_count: usize::from(n),
                        compressed_bytes: c.len(),
                    }
                }
                _ => raw_page(page, mode),
            }
        }
        CompressionMode::Colocated1k => {
            let parts = std::array::from_fn(|i| classify_block(&page[i * BLOCK..(i + 1) * BLOCK], backend));
            pack_colocated(page, parts)
        }
    }
}

/// Recovers block `i` (or the whole page in page4k mode) from chunk bytes
/// `image`, which start at chunk ordinal `first_chunk`.
pub fn unpack(
    image: &[u8],
    first_chunk: usize,
    blocks: &[BlockState; 4],
    layout: &PackedPageLayout,
    mode: CompressionMode,
    i: usize,
    backend: &dyn Compressor,
) -> Result<Vec<u8>, CodecError> {
    let base = first_chunk * CHUNK;
    match mode {
        CompressionMode::Page4k => {
            debug_assert_eq!(base, 0, "page4k streams are fetched whole");
            if blocks[0].kind == PageType::Incompressible {
                Ok(image[..PAGE].to_vec())
            } else {
                backend.decompress(image, PAGE)
            }
        }
        CompressionMode::Colocated1k => {
            let (off, size) = layout.slots[i].ok_or_else(|| CodecError::Inconsistent(format!("block {i} is not in chunks")))?;
            let s = &image[off - base..off - base + size];
            if blocks[i].size_code == 7 {
                Ok(s.to_vec())
            } else {
                backend.decompress(s, BLOCK)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn bs(kind: PageType, size_code: u8) -> BlockState {
        BlockState { kind, size_code }
    }

    #[test]
    fn latency_matches_hardware_throughput() {
        let m = LatencyModel::default();
        assert_eq!(m.decompress_cycles(1024), 64);
        assert_eq!(m.compress_cycles(1024), 256);
        assert_eq!(m.decompress_cycles(4096), 4 * 64);
        assert_eq!(m.compress_cycles(4096), 4 * 256);
        // 4B/clk and 16B/clk
        assert_eq!(m.compress_cycles(4), 1);
        assert_eq!(m.decompress_cycles(16), 1);
        assert_eq!(m.decompress_ps(1024), 64 * 500);
    }

    #[test]
    fn zero_page_needs_no_chunks() {
        for mode in [CompressionMode::Page4k, CompressionMode::Colocated1k] {
            let p = classify_and_compress(&[0u8; PAGE], mode, &Lz77);
            assert_eq!(p.chunk_count, 0);
            assert!(p.blocks.iter().all(|b| b.kind == PageType::Zero));
        }
    }

    #[test]
    fn two_256b_blocks_share_one_chunk() {
        let mut page = vec![0u8; PAGE];
        page[..BLOCK].copy_from_slice(&oracle::filler_block(256, 1));
        page[BLOCK..2 * BLOCK].copy_from_slice(&oracle::filler_block(256, 2));
        let p = classify_and_compress(&page, CompressionMode::Colocated1k, &SizeOracle);
        assert_eq!(p.chunk_count, 1);
        assert_eq!(p.blocks[0], bs(PageType::Compressed, 1));
        assert_eq!(p.blocks[2], bs(PageType::Zero, 0));
    }

    #[test]
    fn four_incompressible_blocks_take_eight_chunks() {
        let page = synthesize_page(BackendKind::Lz77, 1.0, 3);
        let p = classify_and_compress(&page, CompressionMode::Colocated1k, &Lz77);
        assert_eq!(p.chunk_count, 8);
        assert!(p.blocks.iter().all(|b| *b == bs(PageType::Incompressible, 7)));
    }

    #[test]
    fn fetch_sets_follow_prefix_sums() {
        let l = PackedPageLayout::from_blocks(
            &[bs(PageType::Compressed, 1), bs(PageType::Compressed, 1), bs(PageType::Zero, 0), bs(PageType::Zero, 0)],
            true,
        );
        assert_eq!(l.blocks_to_fetch(1), 0..1);
        assert_eq!(l.blocks_to_fetch(2), 0..0);
        let l = PackedPageLayout::from_blocks(&[bs(PageType::Incompressible, 7); 4], true);
        assert_eq!(l.blocks_to_fetch(2), 4..6);
        // a promoted block without shadows drops out of the stream
        let l = PackedPageLayout::from_blocks(
            &[bs(PageType::Promoted, 3), bs(PageType::Compressed, 1), bs(PageType::Zero, 0), bs(PageType::Zero, 0)],
            false,
        );
        assert_eq!(l.slots[1], Some((0, 256)));
    }

    #[test]
    fn page4k_ratio_two_takes_four_chunks() {
        let page = synthesize_page(BackendKind::SizeOracle, 2.0, 11);
        let p = classify_and_compress(&page, CompressionMode::Page4k, &SizeOracle);
        assert_eq!((p.chunk_count, p.compressed_bytes), (4, 2048));
    }

    fn arb_page() -> impl Strategy<Value = Vec<u8>> {
        // each block: zero, low-entropy or random
        proptest::array::uniform4((0u8..3, any::<u64>())).prop_map(|blocks| {
            let mut page = Vec::with_capacity(PAGE);
            for (k, seed) in blocks {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let blk: Vec<u8> = match k {
                    0 => vec![0; BLOCK],
                    1 => (0..BLOCK).map(|_| rng.random_range(0..4u8)).collect(),
                    _ => (0..BLOCK).map(|_| rng.random()).collect(),
                };
                page.extend_from_slice(&blk);
            }
            page
        })
    }

    proptest! {
        #[test]
        fn pack_fetch_unpack_round_trip(page in arb_page(), colocated: bool) {
            let mode = if colocated { CompressionMode::Colocated1k } else { CompressionMode::Page4k };
            let p = classify_and_compress(&page, mode, &Lz77);
            prop_assert_eq!(p.image.len(), p.chunk_count * CHUNK);
            let layout = p.layout(mode);
            prop_assert_eq!(layout.chunk_count, p.chunk_count);
            match mode {
                CompressionMode::Page4k => {
                    if p.chunk_count > 0 {
                        let out = unpack(&p.image, 0, &p.blocks, &layout, mode, 0, &Lz77).unwrap();
                        prop_assert_eq!(out, page);
                    }
                }
                CompressionMode::Colocated1k => {
                    for i in 0..4 {
                        let blk = &page[i * BLOCK..(i + 1) * BLOCK];
                        let r = layout.blocks_to_fetch(i);
                        if p.blocks[i].kind == PageType::Zero {
                            prop_assert!(r.is_empty());
                            prop_assert!(blk.iter().all(|&b| b == 0));
                            continue;
                        }
                        let img = &p.image[r.start * CHUNK..r.end * CHUNK];
                        let out = unpack(img, r.start, &p.blocks, &layout, mode, i, &Lz77).unwrap();
                        prop_assert_eq!(out, blk);
                    }
                    // slack: under 128B per block plus one partial chunk
                    if p.chunk_count < 8 {
                        prop_assert!(p.chunk_count * CHUNK - p.compressed_bytes < 4 * 128 + CHUNK);
                    }
                }
            }
        }
    }
}
