//! Translation metadata: bit-exact codecs for the three per-page entry
//! formats and the 4-byte page activity entry.
//!
//! All formats pack fields LSB-first in the order they are declared; see
//! `FORMATS.md` at the repository root for the bit maps.

pub mod bits;
mod entry;

pub use entry::{ColocatedEntry, CompactEntry, NaiveEntry};

use serde::{Deserialize, Serialize};

use crate::addr::{DeviceLayout, Mpa, CHUNK_SIZE, OSPN_BITS, PAGE_SIZE};
use crate::error::CodecError;

/// Storage class of a page (naive format) or of a 1KB block (co-located formats).
///
/// The all-zero encoding is `Zero`, so a freshly cleared metadata region
/// reads back as "every page is a zero page".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PageType {
    #[default]
    Zero = 0,
    Compressed = 1,
    Promoted = 2,
    Incompressible = 3,
}

impl PageType {
    pub const ALL: [PageType; 4] = [
        PageType::Zero,
        PageType::Compressed,
        PageType::Promoted,
        PageType::Incompressible,
    ];

    pub fn bits(self) -> u64 {
        self as u64
    }

    pub fn from_bits(v: u64) -> Self {
        Self::ALL[(v & 3) as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            PageType::Zero => "zero",
            PageType::Compressed => "compressed",
            PageType::Promoted => "promoted",
            PageType::Incompressible => "incompressible",
        }
    }
}

/// Largest compressed payload that still fits in seven C-chunks.
pub const MAX_COMPRESSED_PAGE: usize = 7 * CHUNK_SIZE as usize;
/// Threshold at which an incompressible page's write counter wraps.
pub const WR_CNTR_LIMIT: u8 = 16;
/// Granularity of co-located block sizes.
pub const BLOCK_SIZE_QUANTUM: usize = 128;

/// Maps a compressed 4KB page size to its chunk count and storage class.
pub fn required_chunks(compressed_size: usize) -> Result<(u8, PageType), CodecError> {
    match compressed_size {
        0 => Ok((0, PageType::Zero)),
        s if s <= MAX_COMPRESSED_PAGE => Ok((s.div_ceil(CHUNK_SIZE as usize) as u8, PageType::Compressed)),
        s if s <= PAGE_SIZE as usize => Ok((8, PageType::Incompressible)),
        s => Err(CodecError::Inconsistent(format!(
            "compressed size {s} exceeds the 4096B page; store the page raw instead"
        ))),
    }
}

/// 3-bit size code for a co-located block: `(s + 1) * 128` bytes.
pub fn encode_block_sz(compressed_block_size: usize) -> Result<u8, CodecError> {
    if compressed_block_size == 0 || compressed_block_size > 1024 {
        return Err(CodecError::Inconsistent(format!(
            "block size {compressed_block_size} outside 1..=1024 (zero blocks are typed, not sized)"
        )));
    }
    Ok((compressed_block_size.div_ceil(BLOCK_SIZE_QUANTUM) - 1) as u8)
}

pub fn aligned_block_size(size_code: u8) -> usize {
    (usize::from(size_code) + 1) * BLOCK_SIZE_QUANTUM
}

/// Up to eight chunk addresses, in ordinal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChunkList {
    len: u8,
    items: [Mpa; 8],
}

impl ChunkList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(s: &[Mpa]) -> Self {
        assert!(s.len() <= 8, "a page holds at most eight chunks");
        let mut c = Self::new();
        for &m in s {
            c.push(m);
        }
        c
    }

    pub fn push(&mut self, m: Mpa) {
        assert!(self.len < 8, "a page holds at most eight chunks");
        self.items[self.len as usize] = m;
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[Mpa] {
        &self.items[..self.len as usize]
    }

    pub fn clear(&mut self) {
        *self = Self::new();
    }
}

impl Default for Mpa {
    fn default() -> Self {
        Mpa(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockState {
    pub kind: PageType,
    /// Co-located size code; zero for zero blocks and in page-granular mode.
    pub size_code: u8,
}

/// Format-independent view of one page's translation entry.
///
/// `chunks` are the C-chunks holding the packed stream. When `pchunk` is set
/// and `chunks` is non-empty the chunks are shadows and the page is clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PageEntry {
    pub blocks: [BlockState; 4],
    pub chunks: ChunkList,
    pub pchunk: Option<Mpa>,
    pub wr_cntr: u8,
}

impl PageEntry {
    pub fn is_zero_page(&self) -> bool {
        self.blocks.iter().all(|b| b.kind == PageType::Zero) && self.chunks.is_empty() && self.pchunk.is_none()
    }

    pub fn has_promoted(&self) -> bool {
        self.blocks.iter().any(|b| b.kind == PageType::Promoted)
    }

    /// A promoted page whose compressed copy is still valid.
    pub fn is_clean_promoted(&self) -> bool {
        self.pchunk.is_some() && !self.chunks.is_empty()
    }

    pub fn shadow_chunks(&self) -> usize {
        if self.pchunk.is_some() {
            self.chunks.len()
        } else {
            0
        }
    }

    /// Page-granular type, used by the naive format.
    pub fn page_type(&self) -> Option<PageType> {
        let k = self.blocks[0].kind;
        self.blocks.iter().all(|b| b.kind == k).then_some(k)
    }

    pub fn uniform(kind: PageType) -> Self {
        PageEntry {
            blocks: [BlockState { kind, size_code: 0 }; 4],
            ..Default::default()
        }
    }
}

/// Which on-device entry format the metadata region uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetadataFormat {
    /// One 265-bit entry per 64B slot, page-granular type.
    Naive,
    /// 283-bit entries with per-block type and size, packed back to back.
    Colocated,
    /// 256-bit sub-region-relative entries, two per 64B line.
    Compact,
}

impl MetadataFormat {
    /// Bits occupied per entry in the metadata region.
    pub fn pitch_bits(self) -> u64 {
        match self {
            MetadataFormat::Naive => 512,
            MetadataFormat::Colocated => u64::from(entry::COLOCATED_BITS),
            MetadataFormat::Compact => u64::from(entry::COMPACT_BITS),
        }
    }

    /// Meaningful bits of an entry.
    pub fn used_bits(self) -> u32 {
        match self {
            MetadataFormat::Naive => entry::NAIVE_BITS,
            MetadataFormat::Colocated => entry::COLOCATED_BITS,
            MetadataFormat::Compact => entry::COMPACT_BITS,
        }
    }

    pub fn encoded_len(self) -> usize {
        (self.pitch_bits() as usize).div_ceil(8)
    }

    /// Entries fetched together by one metadata-cache fill.
    pub fn entries_per_unit(self) -> u64 {
        match self {
            MetadataFormat::Compact => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetadataFormat::Naive => "naive",
            MetadataFormat::Colocated => "colocated",
            MetadataFormat::Compact => "compact",
        }
    }

    pub fn encode(self, e: &PageEntry, layout: &DeviceLayout) -> Result<Vec<u8>, CodecError> {
        Ok(match self {
            MetadataFormat::Naive => NaiveEntry::from_page(e)?.encode()?.to_vec(),
            MetadataFormat::Colocated => ColocatedEntry::from_page(e)?.encode()?.to_vec(),
            MetadataFormat::Compact => CompactEntry::from_page(e, layout)?.encode()?.to_vec(),
        })
    }

    pub fn decode(self, bytes: &[u8], layout: &DeviceLayout) -> Result<PageEntry, CodecError> {
        match self {
            MetadataFormat::Naive => NaiveEntry::decode(bytes)?.to_page(),
            MetadataFormat::Colocated => ColocatedEntry::decode(bytes)?.to_page(),
            MetadataFormat::Compact => CompactEntry::decode(bytes)?.to_page(layout),
        }
    }
}

/// One 4-byte record of the page activity region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActivityEntry {
    pub allocated: bool,
    pub ospn: u32,
    pub referenced: bool,
}

pub const ACTIVITY_ENTRIES_PER_LINE: u64 = 16;

impl ActivityEntry {
    /// `allocated` is the MSB, `referenced` the LSB, OSPN in between.
    pub fn pack(self) -> Result<u32, CodecError> {
        if u64::from(self.ospn) >> OSPN_BITS != 0 {
            return Err(CodecError::FieldOverflow {
                field: "ospn",
                value: self.ospn.into(),
                bits: OSPN_BITS,
            });
        }
        Ok((u32::from(self.allocated) << 31) | (self.ospn << 1) | u32::from(self.referenced))
    }

    pub fn unpack(word: u32) -> Self {
        ActivityEntry {
            allocated: word >> 31 == 1,
            ospn: (word >> 1) & ((1 << OSPN_BITS) - 1),
            referenced: word & 1 == 1,
        }
    }

    /// Byte offset of the entry for `pchunk_index` within its 64B line.
    pub fn line_offset(pchunk_index: u64) -> usize {
        ((pchunk_index % ACTIVITY_ENTRIES_PER_LINE) * 4) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn required_chunks_examples() {
        assert_eq!(required_chunks(2000).unwrap(), (4, PageType::Compressed));
        assert_eq!(required_chunks(0).unwrap(), (0, PageType::Zero));
        assert_eq!(required_chunks(3584).unwrap(), (7, PageType::Compressed));
        assert_eq!(required_chunks(3585).unwrap(), (8, PageType::Incompressible));
        assert_eq!(required_chunks(4096).unwrap(), (8, PageType::Incompressible));
        assert!(required_chunks(4097).is_err());
    }

    #[test]
    fn block_size_codes() {
        assert_eq!(encode_block_sz(256).unwrap(), 1);
        assert_eq!(aligned_block_size(1), 256);
        assert_eq!(encode_block_sz(1).unwrap(), 0);
        assert_eq!(aligned_block_size(0), 128);
        assert_eq!(encode_block_sz(1024).unwrap(), 7);
        assert_eq!(aligned_block_size(7), 1024);
        assert!(encode_block_sz(0).is_err());
        assert!(encode_block_sz(1025).is_err());
    }

    #[test]
    fn activity_examples() {
        assert_eq!(ActivityEntry::default().pack().unwrap(), 0);
        let e = ActivityEntry { allocated: true, ospn: 5, referenced: true };
        assert_eq!(ActivityEntry::unpack(e.pack().unwrap()), e);
        assert!(ActivityEntry { allocated: false, ospn: 1 << 30, referenced: false }
            .pack()
            .is_err());
        assert_eq!(ActivityEntry::line_offset(0), 0);
        assert_eq!(ActivityEntry::line_offset(17), 4);
        assert_eq!(ActivityEntry::line_offset(15), 60);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1 << 16))]
        #[test]
        fn activity_round_trip(allocated: bool, ospn in 0u32..(1 << 30), referenced: bool) {
            let e = ActivityEntry { allocated, ospn, referenced };
            prop_assert_eq!(ActivityEntry::unpack(e.pack().unwrap()), e);
        }
    }

    proptest! {
        #[test]
        fn block_size_code_covers_size(size in 1usize..=1024) {
            let s = encode_block_sz(size).unwrap();
            prop_assert!(s <= 7);
            prop_assert!(aligned_block_size(s) >= size);
            prop_assert!(aligned_block_size(s) - size < 128);
        }
    }
}
