use super::bits::{BitReader, BitWriter};
use super::{aligned_block_size, BlockState, ChunkList, PageEntry, PageType};
use crate::addr::{
    pchunk_from_pointer, pchunk_pointer, DeviceLayout, Mpa, CHUNK_INDEX_BITS, CHUNK_SHIFT, CHUNK_SIZE,
    PCHUNK_PTR_BITS,
};
use crate::error::CodecError;

const TYPE_BITS: u32 = 2;
const NUM_CHUNKS_BITS: u32 = 3;
const WR_CNTR_BITS: u32 = 4;
const FULL_PTR_BITS: u32 = 32;
const BLOCK_SZ_BITS: u32 = 3;
const SUB_REGION_BITS: u32 = 4;

pub const NAIVE_BITS: u32 = TYPE_BITS + NUM_CHUNKS_BITS + WR_CNTR_BITS + 8 * FULL_PTR_BITS;
pub const COLOCATED_BITS: u32 =
    4 * (TYPE_BITS + BLOCK_SZ_BITS) + NUM_CHUNKS_BITS + WR_CNTR_BITS + 8 * FULL_PTR_BITS;
pub const COMPACT_BITS: u32 = 4 * (TYPE_BITS + BLOCK_SZ_BITS)
    + NUM_CHUNKS_BITS
    + WR_CNTR_BITS
    + SUB_REGION_BITS
    + 7 * CHUNK_INDEX_BITS
    + PCHUNK_PTR_BITS;

const _: () = assert!(COMPACT_BITS == 256);

fn inconsistent(msg: impl Into<String>) -> CodecError {
    CodecError::Inconsistent(msg.into())
}

fn full_chunk_ptr(m: Mpa) -> Result<u32, CodecError> {
    if !m.is_aligned(CHUNK_SIZE) || m.0 >> CHUNK_SHIFT > u64::from(u32::MAX) {
        return Err(inconsistent(format!("{:#x} is not a 512B chunk address", m.0)));
    }
    Ok((m.0 >> CHUNK_SHIFT) as u32)
}

fn chunk_from_full_ptr(p: u32) -> Mpa {
    Mpa(u64::from(p) << CHUNK_SHIFT)
}

/// Valid pointer count encoded by `num_chunks` (count − 1), given the types.
fn pointer_count(all_zero: bool, num_chunks: u8) -> usize {
    if all_zero {
        0
    } else {
        usize::from(num_chunks) + 1
    }
}

/// Checks the per-block fields of the co-located formats and returns the
/// number of C-chunk pointers and whether a P-chunk pointer is present.
fn validate_blocks(
    types: &[PageType; 4],
    sizes: &[u8; 4],
    num_chunks: u8,
    wr_cntr: u8,
) -> Result<(usize, bool), CodecError> {
    let all_zero = types.iter().all(|&t| t == PageType::Zero);
    if all_zero {
        if num_chunks != 0 || sizes.iter().any(|&s| s != 0) || wr_cntr != 0 {
            return Err(inconsistent("zero page with non-zero fields"));
        }
        return Ok((0, false));
    }
    let has_p = types.contains(&PageType::Promoted);
    let c = pointer_count(false, num_chunks) - usize::from(has_p);
    for (i, (&t, &s)) in types.iter().zip(sizes).enumerate() {
        match t {
            PageType::Zero if s != 0 => return Err(inconsistent(format!("zero block {i} has size code {s}"))),
            PageType::Incompressible if s != 7 || c == 0 => {
                return Err(inconsistent(format!("incompressible block {i} must be raw in chunks")))
            }
            PageType::Compressed if s == 7 || c == 0 => {
                return Err(inconsistent(format!("compressed block {i} must be stored in chunks below 1KB")))
            }
            PageType::Promoted if c == 0 && s != 0 => {
                return Err(inconsistent(format!("dirty promoted block {i} keeps a size code")))
            }
            _ => {}
        }
    }
    if c > 0 {
        let total: usize = types
            .iter()
            .zip(sizes)
            .filter(|(&t, _)| t != PageType::Zero)
            .map(|(_, &s)| aligned_block_size(s))
            .sum();
        let need = total.div_ceil(CHUNK_SIZE as usize);
        if need != c {
            return Err(inconsistent(format!("{c} chunks recorded but blocks need {need}")));
        }
        if c == 8 && types.iter().any(|&t| t != PageType::Incompressible) {
            return Err(inconsistent("an eight-chunk page must be fully incompressible"));
        }
    }
    Ok((c, has_p))
}

fn blocks_from_page(e: &PageEntry) -> ([PageType; 4], [u8; 4]) {
    (e.blocks.map(|b| b.kind), e.blocks.map(|b| b.size_code))
}

fn num_chunks_field(e: &PageEntry) -> Result<u8, CodecError> {
    let count = e.chunks.len() + usize::from(e.pchunk.is_some());
    if count > 8 {
        return Err(inconsistent("more than eight pointer fields in use"));
    }
    Ok(count.saturating_sub(1) as u8)
}

fn check_pchunk_presence(e: &PageEntry) -> Result<(), CodecError> {
    if e.has_promoted() != e.pchunk.is_some() {
        return Err(inconsistent("P-chunk pointer present iff some block is promoted"));
    }
    Ok(())
}

/// Page-granular entry: `type`, `num_chunks`, `wr_cntr`, eight 32-bit chunk
/// pointers. Stored one per 64B slot; 265 of 512 bits used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NaiveEntry {
    pub page_type: PageType,
    pub num_chunks: u8,
    pub wr_cntr: u8,
    pub ptr_chunk: [u32; 8],
}

impl NaiveEntry {
    pub const BITS: u32 = NAIVE_BITS;

    fn validate(&self) -> Result<(), CodecError> {
        let v = pointer_count(self.page_type == PageType::Zero, self.num_chunks);
        let used: Vec<usize> = match self.page_type {
            PageType::Zero => {
                if self.num_chunks != 0 || self.wr_cntr != 0 {
                    return Err(inconsistent("zero page with non-zero fields"));
                }
                vec![]
            }
            PageType::Compressed => {
                if v > 7 {
                    return Err(inconsistent("compressed page with eight chunks"));
                }
                (0..v).collect()
            }
            PageType::Incompressible => {
                if v != 8 {
                    return Err(inconsistent("incompressible page must use all eight chunks"));
                }
                (0..8).collect()
            }
            PageType::Promoted => {
                if self.ptr_chunk[7] % 8 != 0 {
                    return Err(inconsistent("P-chunk pointer is not 4KB-aligned"));
                }
                (0..v - 1).chain(std::iter::once(7)).collect()
            }
        };
        for (i, &p) in self.ptr_chunk.iter().enumerate() {
            if !used.contains(&i) && p != 0 {
                return Err(inconsistent(format!("unused pointer slot {i} is non-zero")));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; 64], CodecError> {
        let mut buf = [0u8; 64];
        let mut w = BitWriter::new(&mut buf);
        w.put("type", self.page_type.bits(), TYPE_BITS)?;
        w.put("num_chunks", self.num_chunks.into(), NUM_CHUNKS_BITS)?;
        w.put("wr_cntr", self.wr_cntr.into(), WR_CNTR_BITS)?;
        for p in self.ptr_chunk {
            w.put("ptr_chunk", p.into(), FULL_PTR_BITS)?;
        }
        debug_assert_eq!(w.position(), NAIVE_BITS as usize);
        self.validate()?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != 64 {
            return Err(CodecError::Malformed(format!("naive entry needs 64 bytes, got {}", bytes.len())));
        }
        let mut r = BitReader::new(bytes);
        let mut e = NaiveEntry {
            page_type: PageType::from_bits(r.take(TYPE_BITS)),
            num_chunks: r.take(NUM_CHUNKS_BITS) as u8,
            wr_cntr: r.take(WR_CNTR_BITS) as u8,
            ptr_chunk: [0; 8],
        };
        for p in &mut e.ptr_chunk {
            *p = r.take(FULL_PTR_BITS) as u32;
        }
        if !r.rest_is_zero() {
            return Err(CodecError::Malformed("reserved bits set in naive entry".into()));
        }
        e.validate()?;
        Ok(e)
    }

    pub fn from_page(e: &PageEntry) -> Result<Self, CodecError> {
        let page_type = e
            .page_type()
            .ok_or_else(|| inconsistent("naive entries need a uniform page type"))?;
        if e.blocks.iter().any(|b| b.size_code != 0) {
            return Err(inconsistent("naive entries carry no block sizes"));
        }
        check_pchunk_presence(e)?;
        let mut ptr_chunk = [0u32; 8];
        for (slot, &m) in ptr_chunk.iter_mut().zip(e.chunks.as_slice()) {
            *slot = full_chunk_ptr(m)?;
        }
        if let Some(p) = e.pchunk {
            if e.chunks.len() > 7 {
                return Err(inconsistent("promoted page with eight shadow chunks"));
            }
            ptr_chunk[7] = full_chunk_ptr(p)?;
        }
        let n = NaiveEntry {
            page_type,
            num_chunks: num_chunks_field(e)?,
            wr_cntr: e.wr_cntr,
            ptr_chunk,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn to_page(&self) -> Result<PageEntry, CodecError> {
        self.validate()?;
        let v = pointer_count(self.page_type == PageType::Zero, self.num_chunks);
        let mut e = PageEntry::uniform(self.page_type);
        e.wr_cntr = self.wr_cntr;
        let c = if self.page_type == PageType::Promoted {
            e.pchunk = Some(chunk_from_full_ptr(self.ptr_chunk[7]));
            v - 1
        } else {
            v
        };
        for &p in &self.ptr_chunk[..c] {
            e.chunks.push(chunk_from_full_ptr(p));
        }
        Ok(e)
    }
}

/// Co-location-aware entry: per-block type and 3-bit size, 32-bit pointers.
/// 283 bits, packed back to back in the metadata region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ColocatedEntry {
    pub block_type: [PageType; 4],
    pub block_sz: [u8; 4],
    pub num_chunks: u8,
    pub wr_cntr: u8,
    pub ptr_chunk: [u32; 8],
}

impl ColocatedEntry {
    pub const BITS: u32 = COLOCATED_BITS;

    fn validate(&self) -> Result<(), CodecError> {
        let (c, has_p) = validate_blocks(&self.block_type, &self.block_sz, self.num_chunks, self.wr_cntr)?;
        for (i, &p) in self.ptr_chunk.iter().enumerate() {
            let used = i < c || (has_p && i == 7);
            if !used && p != 0 {
                return Err(inconsistent(format!("unused pointer slot {i} is non-zero")));
            }
        }
        if has_p && self.ptr_chunk[7] % 8 != 0 {
            return Err(inconsistent("P-chunk pointer is not 4KB-aligned"));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; 36], CodecError> {
        let mut buf = [0u8; 36];
        let mut w = BitWriter::new(&mut buf);
        for t in self.block_type {
            w.put("block_type", t.bits(), TYPE_BITS)?;
        }
        for s in self.block_sz {
            w.put("block_sz", s.into(), BLOCK_SZ_BITS)?;
        }
        w.put("num_chunks", self.num_chunks.into(), NUM_CHUNKS_BITS)?;
        w.put("wr_cntr", self.wr_cntr.into(), WR_CNTR_BITS)?;
        for p in self.ptr_chunk {
            w.put("ptr_chunk", p.into(), FULL_PTR_BITS)?;
        }
        debug_assert_eq!(w.position(), COLOCATED_BITS as usize);
        self.validate()?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != 36 {
            return Err(CodecError::Malformed(format!("co-located entry needs 36 bytes, got {}", bytes.len())));
        }
        let mut r = BitReader::new(bytes);
        let mut e = ColocatedEntry::default();
        for t in &mut e.block_type {
            *t = PageType::from_bits(r.take(TYPE_BITS));
        }
        for s in &mut e.block_sz {
            *s = r.take(BLOCK_SZ_BITS) as u8;
        }
        e.num_chunks = r.take(NUM_CHUNKS_BITS) as u8;
        e.wr_cntr = r.take(WR_CNTR_BITS) as u8;
        for p in &mut e.ptr_chunk {
            *p = r.take(FULL_PTR_BITS) as u32;
        }
        if !r.rest_is_zero() {
            return Err(CodecError::Malformed("padding bits set in co-located entry".into()));
        }
        e.validate()?;
        Ok(e)
    }

    pub fn from_page(e: &PageEntry) -> Result<Self, CodecError> {
        check_pchunk_presence(e)?;
        let (block_type, block_sz) = blocks_from_page(e);
        let mut ptr_chunk = [0u32; 8];
        for (slot, &m) in ptr_chunk.iter_mut().zip(e.chunks.as_slice()) {
            *slot = full_chunk_ptr(m)?;
        }
        if let Some(p) = e.pchunk {
            if e.chunks.len() > 7 {
                return Err(inconsistent("promoted page with eight shadow chunks"));
            }
            ptr_chunk[7] = full_chunk_ptr(p)?;
        }
        let c = ColocatedEntry {
            block_type,
            block_sz,
            num_chunks: num_chunks_field(e)?,
            wr_cntr: e.wr_cntr,
            ptr_chunk,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_page(&self) -> Result<PageEntry, CodecError> {
        let (c, has_p) = validate_blocks(&self.block_type, &self.block_sz, self.num_chunks, self.wr_cntr)?;
        let mut e = PageEntry {
            wr_cntr: self.wr_cntr,
            ..Default::default()
        };
        for i in 0..4 {
            e.blocks[i] = BlockState {
                kind: self.block_type[i],
                size_code: self.block_sz[i],
            };
        }
        for &p in &self.ptr_chunk[..c] {
            e.chunks.push(chunk_from_full_ptr(p));
        }
        if has_p {
            e.pchunk = Some(chunk_from_full_ptr(self.ptr_chunk[7]));
        }
        Ok(e)
    }
}

/// Compacted 32-byte entry: sub-region-relative 28-bit C-chunk indices and a
/// 29-bit last pointer that holds either the P-chunk or the eighth C-chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompactEntry {
    pub block_type: [PageType; 4],
    pub block_sz: [u8; 4],
    pub num_chunks: u8,
    pub wr_cntr: u8,
    pub sub_region: u8,
    pub ptr_chunk: [u32; 7],
    pub ptr_last: u32,
}

impl CompactEntry {
    pub const BITS: u32 = COMPACT_BITS;

    fn validate(&self) -> Result<(usize, bool), CodecError> {
        let (c, has_p) = validate_blocks(&self.block_type, &self.block_sz, self.num_chunks, self.wr_cntr)?;
        for (i, &p) in self.ptr_chunk.iter().enumerate() {
            if i >= c && p != 0 {
                return Err(inconsistent(format!("unused pointer slot {i} is non-zero")));
            }
        }
        if !has_p && c < 8 && self.ptr_last != 0 {
            return Err(inconsistent("last pointer set without a P-chunk or eighth chunk"));
        }
        if c == 8 && u64::from(self.ptr_last) >> CHUNK_INDEX_BITS != 0 {
            return Err(inconsistent("eighth C-chunk index exceeds 28 bits"));
        }
        if c == 0 && self.sub_region != 0 {
            return Err(inconsistent("sub-region set on a page without C-chunks"));
        }
        Ok((c, has_p))
    }

    pub fn encode(&self) -> Result<[u8; 32], CodecError> {
        let mut buf = [0u8; 32];
        let mut w = BitWriter::new(&mut buf);
        for t in self.block_type {
            w.put("block_type", t.bits(), TYPE_BITS)?;
        }
        for s in self.block_sz {
            w.put("block_sz", s.into(), BLOCK_SZ_BITS)?;
        }
        w.put("num_chunks", self.num_chunks.into(), NUM_CHUNKS_BITS)?;
        w.put("wr_cntr", self.wr_cntr.into(), WR_CNTR_BITS)?;
        w.put("sub_region", self.sub_region.into(), SUB_REGION_BITS)?;
        for p in self.ptr_chunk {
            w.put("ptr_chunk", p.into(), CHUNK_INDEX_BITS)?;
        }
        w.put("ptr_last", self.ptr_last.into(), PCHUNK_PTR_BITS)?;
        debug_assert_eq!(w.position(), 256);
        self.validate()?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != 32 {
            return Err(CodecError::Malformed(format!("compact entry needs 32 bytes, got {}", bytes.len())));
        }
        let mut r = BitReader::new(bytes);
        let mut e = CompactEntry::default();
        for t in &mut e.block_type {
            *t = PageType::from_bits(r.take(TYPE_BITS));
        }
        for s in &mut e.block_sz {
            *s = r.take(BLOCK_SZ_BITS) as u8;
        }
        e.num_chunks = r.take(NUM_CHUNKS_BITS) as u8;
        e.wr_cntr = r.take(WR_CNTR_BITS) as u8;
        e.sub_region = r.take(SUB_REGION_BITS) as u8;
        for p in &mut e.ptr_chunk {
            *p = r.take(CHUNK_INDEX_BITS) as u32;
        }
        e.ptr_last = r.take(PCHUNK_PTR_BITS) as u32;
        e.validate()?;
        Ok(e)
    }

    pub fn from_page(e: &PageEntry, layout: &DeviceLayout) -> Result<Self, CodecError> {
        check_pchunk_presence(e)?;
        let (block_type, block_sz) = blocks_from_page(e);
        let chunks = e.chunks.as_slice();
        let sub_region = match chunks.first() {
            Some(&m) => layout
                .sub_region_of(m)
                .ok_or_else(|| inconsistent(format!("{:#x} is outside the compressed region", m.0)))?,
            None => 0,
        };
        let mut idx = [0u32; 8];
        for (slot, &m) in idx.iter_mut().zip(chunks) {
            *slot = layout.chunk_index(m, sub_region)?;
        }
        let ptr_last = match e.pchunk {
            Some(p) => {
                if chunks.len() > 7 {
                    return Err(inconsistent("promoted page with eight shadow chunks"));
                }
                pchunk_pointer(p)?
            }
            None if chunks.len() == 8 => idx[7],
            None => 0,
        };
        let mut ptr_chunk = [0u32; 7];
        ptr_chunk.copy_from_slice(&idx[..7]);
        let c = CompactEntry {
            block_type,
            block_sz,
            num_chunks: num_chunks_field(e)?,
            wr_cntr: e.wr_cntr,
            sub_region,
            ptr_chunk,
            ptr_last,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_page(&self, layout: &DeviceLayout) -> Result<PageEntry, CodecError> {
        let (c, has_p) = self.validate()?;
        let mut e = PageEntry {
            wr_cntr: self.wr_cntr,
            ..Default::default()
        };
        for i in 0..4 {
            e.blocks[i] = BlockState {
                kind: self.block_type[i],
                size_code: self.block_sz[i],
            };
        }
        let mut chunks = ChunkList::new();
        for i in 0..c {
            let index = if i < 7 { self.ptr_chunk[i] } else { self.ptr_last };
            chunks.push(layout.chunk_mpa(self.sub_region, index)?);
        }
        e.chunks = chunks;
        if has_p {
            e.pchunk = Some(pchunk_from_pointer(self.ptr_last));
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::LayoutParams;
    use crate::metadata::{encode_block_sz, required_chunks, MetadataFormat};
    use proptest::prelude::*;

    #[test]
    fn widths_match_published_totals() {
        assert_eq!(NAIVE_BITS, 265);
        assert_eq!(COLOCATED_BITS, 283);
        assert_eq!(COMPACT_BITS, 256);
        assert_eq!(COMPACT_BITS / 8, 32);
    }

    #[test]
    fn zero_compact_entry_is_all_zero_bytes() {
        let e = CompactEntry::default();
        let bytes = e.encode().unwrap();
        assert_eq!(bytes, [0u8; 32]);
        assert_eq!(CompactEntry::decode(&bytes).unwrap(), e);
    }

    #[test]
    fn page_of_2000_bytes_encodes_four_chunks() {
        let (n, t) = required_chunks(2000).unwrap();
        let e = NaiveEntry {
            page_type: t,
            num_chunks: n - 1,
            wr_cntr: 0,
            ptr_chunk: [10, 11, 12, 13, 0, 0, 0, 0],
        };
        let d = NaiveEntry::decode(&e.encode().unwrap()).unwrap();
        assert_eq!(d.to_page().unwrap().chunks.len(), 4);
    }

    #[test]
    fn decode_rejects_inconsistent_patterns() {
        // compressed page claiming eight chunks
        let mut e = NaiveEntry {
            page_type: PageType::Compressed,
            num_chunks: 7,
            ..Default::default()
        };
        assert!(e.encode().is_err());
        // reserved bits beyond 265
        e.num_chunks = 0;
        let mut bytes = e.encode().unwrap();
        bytes[40] = 1;
        assert!(NaiveEntry::decode(&bytes).is_err());
        // block sizes disagree with chunk count
        let c = CompactEntry {
            block_type: [PageType::Compressed, PageType::Zero, PageType::Zero, PageType::Zero],
            block_sz: [1, 0, 0, 0],
            num_chunks: 1, // two chunks for a 256B block
            ..Default::default()
        };
        assert!(c.encode().is_err());
        // field overflow
        let c = CompactEntry {
            block_type: [PageType::Compressed, PageType::Zero, PageType::Zero, PageType::Zero],
            ptr_chunk: [1 << 28, 0, 0, 0, 0, 0, 0],
            ..Default::default()
        };
        assert!(matches!(c.encode(), Err(CodecError::FieldOverflow { .. })));
    }

    #[test]
    fn shadowed_promotion_keeps_chunk_pointers() {
        let layout = DeviceLayout::new(&LayoutParams::default()).unwrap();
        let base = layout.compressed.base;
        let mut page = PageEntry::default();
        page.blocks[0] = BlockState { kind: PageType::Promoted, size_code: 1 };
        page.blocks[1] = BlockState { kind: PageType::Compressed, size_code: 1 };
        page.chunks.push(Mpa(base + 512 * 9));
        page.pchunk = Some(Mpa(layout.promoted.base));
        for f in [MetadataFormat::Colocated, MetadataFormat::Compact] {
            let bytes = f.encode(&page, &layout).unwrap();
            let back = f.decode(&bytes, &layout).unwrap();
            assert_eq!(back, page);
            assert!(back.is_clean_promoted());
        }
        // Dirty: no C-chunk pointers remain.
        page.chunks.clear();
        page.blocks[1] = BlockState { kind: PageType::Promoted, size_code: 0 };
        page.blocks[0].size_code = 0;
        let bytes = MetadataFormat::Compact.encode(&page, &layout).unwrap();
        let back = MetadataFormat::Compact.decode(&bytes, &layout).unwrap();
        assert!(!back.is_clean_promoted());
        assert_eq!(back, page);
    }

    // Generators for structurally valid entries.

    fn arb_block_page() -> impl Strategy<Value = ([PageType; 4], [u8; 4], usize, bool)> {
        // Per block: 0 zero, 1 compressed (code 0..=6), 2 promoted, 3 incompressible
        (
            proptest::array::uniform4((0u8..4, 0u8..7)),
            any::<bool>(),
        )
            .prop_filter_map("valid chunk budget", |(blocks, dirty)| {
                let mut types = [PageType::Zero; 4];
                let mut sizes = [0u8; 4];
                for (i, (k, s)) in blocks.into_iter().enumerate() {
                    types[i] = PageType::from_bits(k.into());
                    sizes[i] = match types[i] {
                        PageType::Zero => 0,
                        PageType::Incompressible => 7,
                        _ => s,
                    };
                }
                let has_p = types.contains(&PageType::Promoted);
                let stored = types.iter().any(|t| matches!(t, PageType::Compressed | PageType::Incompressible));
                let dirty = dirty && has_p && !stored;
                if dirty {
                    for (t, s) in types.iter().zip(sizes.iter_mut()) {
                        if *t == PageType::Promoted {
                            *s = 0;
                        }
                    }
                    return Some((types, sizes, 0, true));
                }
                if types.iter().all(|&t| t == PageType::Zero) {
                    return Some((types, sizes, 0, false));
                }
                let total: usize = types
                    .iter()
                    .zip(&sizes)
                    .filter(|(t, _)| **t != PageType::Zero)
                    .map(|(_, &s)| aligned_block_size(s))
                    .sum();
                let c = total.div_ceil(512);
                if c == 8 && types.iter().any(|&t| t != PageType::Incompressible) {
                    return None;
                }
                if has_p && c > 7 {
                    return None;
                }
                Some((types, sizes, c, has_p))
            })
    }

    fn arb_compact() -> impl Strategy<Value = CompactEntry> {
        (arb_block_page(), 0u8..16, 0u8..16, proptest::array::uniform8(0u32..(1 << 28)), 0u32..(1 << 26))
            .prop_map(|((types, sizes, c, has_p), wr, sub, idx, pptr)| {
                let all_zero = types.iter().all(|&t| t == PageType::Zero);
                let mut e = CompactEntry {
                    block_type: types,
                    block_sz: sizes,
                    num_chunks: if all_zero { 0 } else { (c + usize::from(has_p) - 1) as u8 },
                    wr_cntr: if all_zero { 0 } else { wr },
                    sub_region: if c > 0 { sub } else { 0 },
                    ..Default::default()
                };
                for i in 0..c.min(7) {
                    e.ptr_chunk[i] = idx[i];
                }
                if has_p {
                    e.ptr_last = pptr << 3;
                } else if c == 8 {
                    e.ptr_last = idx[7];
                }
                e
            })
    }

    fn arb_colocated() -> impl Strategy<Value = ColocatedEntry> {
        (arb_block_page(), 0u8..16, proptest::array::uniform8(any::<u32>()), 0u32..(1 << 29))
            .prop_map(|((types, sizes, c, has_p), wr, ptrs, pptr)| {
                let all_zero = types.iter().all(|&t| t == PageType::Zero);
                let mut e = ColocatedEntry {
                    block_type: types,
                    block_sz: sizes,
                    num_chunks: if all_zero { 0 } else { (c + usize::from(has_p) - 1) as u8 },
                    wr_cntr: if all_zero { 0 } else { wr },
                    ..Default::default()
                };
                e.ptr_chunk[..c].copy_from_slice(&ptrs[..c]);
                if has_p {
                    e.ptr_chunk[7] = pptr << 3;
                }
                e
            })
    }

    fn arb_naive() -> impl Strategy<Value = NaiveEntry> {
        (0u8..4, 1usize..=7, 0usize..=7, 0u8..16, proptest::array::uniform8(any::<u32>()), 0u32..(1 << 29))
            .prop_map(|(k, comp, shadows, wr, ptrs, pptr)| {
                let page_type = PageType::from_bits(k.into());
                let mut e = NaiveEntry { page_type, ..Default::default() };
                match page_type {
                    PageType::Zero => {}
                    PageType::Compressed => {
                        e.num_chunks = (comp - 1) as u8;
                        e.ptr_chunk[..comp].copy_from_slice(&ptrs[..comp]);
                    }
                    PageType::Incompressible => {
                        e.num_chunks = 7;
                        e.ptr_chunk = ptrs;
                    }
                    PageType::Promoted => {
                        e.num_chunks = shadows as u8;
                        e.ptr_chunk[..shadows].copy_from_slice(&ptrs[..shadows]);
                        e.ptr_chunk[7] = pptr << 3;
                    }
                }
                if page_type != PageType::Zero {
                    e.wr_cntr = wr;
                }
                e
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]

        #[test]
        fn compact_round_trip(e in arb_compact()) {
            let bytes = e.encode().unwrap();
            prop_assert_eq!(bytes.len(), 32);
            prop_assert_eq!(CompactEntry::decode(&bytes).unwrap(), e);
        }

        #[test]
        fn colocated_round_trip(e in arb_colocated()) {
            let bytes = e.encode().unwrap();
            prop_assert_eq!(ColocatedEntry::decode(&bytes).unwrap(), e);
        }

        #[test]
        fn naive_round_trip(e in arb_naive()) {
            let bytes = e.encode().unwrap();
            prop_assert_eq!(NaiveEntry::decode(&bytes).unwrap(), e);
        }
    }

    proptest! {
        #[test]
        fn decoded_compact_pointers_stay_in_sub_region(e in arb_compact()) {
            let layout = DeviceLayout::new(&LayoutParams {
                compressed_size: 16 << 30,
                sub_region_size: 1 << 30,
                advertised_capacity: Some(64 << 30),
                ..LayoutParams::default()
            }).unwrap();
            // Shrink indices into this layout's 2^21-chunk sub-regions.
            let mut e = e;
            for p in e.ptr_chunk.iter_mut() { *p &= (1 << 21) - 1; }
            if !e.block_type.contains(&PageType::Promoted) {
                e.ptr_last &= (1 << 21) - 1;
            }
            if let Ok(page) = e.to_page(&layout) {
                for m in page.chunks.as_slice() {
                    prop_assert_eq!(layout.sub_region_of(*m), Some(e.sub_region));
                }
                let again = CompactEntry::from_page(&page, &layout).unwrap();
                prop_assert_eq!(again, e);
            }
        }

        #[test]
        fn block_offsets_follow_prefix_sums(sizes in proptest::array::uniform4(1usize..=1024)) {
            let codes: Vec<u8> = sizes.iter().map(|&s| encode_block_sz(s).unwrap()).collect();
            let aligned: Vec<usize> = codes.iter().map(|&c| aligned_block_size(c)).collect();
            let total: usize = aligned.iter().sum();
            let mut off = 0;
            for (i, a) in aligned.iter().enumerate() {
                let from_codes: usize = codes[..i].iter().map(|&c| aligned_block_size(c)).sum();
                prop_assert_eq!(from_codes, off);
                off += a;
            }
            prop_assert_eq!(total.div_ceil(512), aligned.iter().sum::<usize>().div_ceil(512));
        }
    }
}
