//! Device address spaces, region placement, and the chunk arithmetic every
//! other module shares.
//!
//! The device exposes an OS-visible physical address space (OSPA) to the
//! host and translates each 4KB OS page into memory physical addresses (MPA)
//! inside one of four regions:
//!
//! ```text
//!  0 ───────────────────────────────────────────────────────────── 2^41
//!  | metadata | activity | compressed (N sub-regions) | promoted |   ...
//! ```
//!
//! Physical memory is simulated sparsely, so the full 41-bit space costs
//! nothing until touched.

use serde::{Deserialize, Serialize};

use crate::error::AddrError;

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;
pub const CHUNK_SIZE: u64 = 512;
pub const CHUNK_SHIFT: u32 = 9;
pub const BLOCK_SIZE: u64 = 1024;
pub const LINE_SIZE: u64 = 64;
pub const LINE_SHIFT: u32 = 6;
pub const LINES_PER_PAGE: u64 = PAGE_SIZE / LINE_SIZE;
pub const CHUNKS_PER_PAGE: usize = (PAGE_SIZE / CHUNK_SIZE) as usize;

/// Width of the device physical address space (2TB).
pub const PHYS_ADDR_BITS: u32 = 41;
/// Width of an OS page number as stored in activity entries.
pub const OSPN_BITS: u32 = 30;
/// Width of a sub-region-relative C-chunk index.
pub const CHUNK_INDEX_BITS: u32 = 28;
/// Width of a P-chunk pointer.
pub const PCHUNK_PTR_BITS: u32 = PHYS_ADDR_BITS - PAGE_SHIFT;
/// Maximum number of sub-regions a 4-bit id can name.
pub const MAX_SUB_REGIONS: u64 = 16;

const _: () = assert!(CHUNK_SIZE * 8 == PAGE_SIZE);
const _: () = assert!(BLOCK_SIZE * 4 == PAGE_SIZE);

/// OS-visible physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ospa(pub u64);

impl Ospa {
    pub fn from_page(ospn: u64, offset: u64) -> Self {
        Ospa((ospn << PAGE_SHIFT) | (offset & (PAGE_SIZE - 1)))
    }

    pub fn ospn(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    /// Rounds down to the containing 64B line.
    pub fn line_aligned(self) -> Self {
        Ospa(self.0 & !(LINE_SIZE - 1))
    }
}

/// Memory physical address inside the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mpa(pub u64);

impl Mpa {
    pub fn offset(self, bytes: u64) -> Self {
        Mpa(self.0 + bytes)
    }

    pub fn line(self) -> u64 {
        self.0 >> LINE_SHIFT
    }

    pub fn is_aligned(self, align: u64) -> bool {
        self.0 % align == 0
    }
}

/// The region an MPA belongs to. `Direct` covers the uncompressed baseline,
/// which maps OSPA straight onto device memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Metadata,
    Activity,
    Compressed,
    Promoted,
    Direct,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Metadata,
        Region::Activity,
        Region::Compressed,
        Region::Promoted,
        Region::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Metadata => "metadata",
            Region::Activity => "activity",
            Region::Compressed => "compressed",
            Region::Promoted => "promoted",
            Region::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub base: u64,
    pub size: u64,
}

impl Span {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

/// Sizing inputs for a [`DeviceLayout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub physical_capacity: u64,
    /// Host-visible capacity; `None` means twice the compressed region.
    pub advertised_capacity: Option<u64>,
    pub compressed_size: u64,
    pub promoted_size: u64,
    pub sub_region_size: u64,
    /// Bits per metadata entry slot in the metadata region.
    pub metadata_pitch_bits: u64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            physical_capacity: 1 << PHYS_ADDR_BITS,
            advertised_capacity: None,
            compressed_size: 128 << 30,
            promoted_size: 512 << 20,
            sub_region_size: 128 << 30,
            metadata_pitch_bits: 256,
        }
    }
}

/// Placement of the four device regions. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceLayout {
    pub physical_capacity: u64,
    pub advertised_capacity: u64,
    pub metadata: Span,
    pub activity: Span,
    pub compressed: Span,
    pub promoted: Span,
    pub sub_region_size: u64,
    pub metadata_pitch_bits: u64,
}

fn round_up(v: u64, align: u64) -> u64 {
    v.div_ceil(align) * align
}

impl DeviceLayout {
    pub fn new(p: &LayoutParams) -> Result<Self, AddrError> {
        let bad = |msg: String| Err(AddrError::Layout(msg));
        if p.physical_capacity == 0 || p.physical_capacity > 1 << PHYS_ADDR_BITS {
            return bad(format!(
                "physical capacity {:#x} must be in (0, 2^{PHYS_ADDR_BITS}]",
                p.physical_capacity
            ));
        }
        if !p.sub_region_size.is_power_of_two()
            || p.sub_region_size < PAGE_SIZE
            || p.sub_region_size > CHUNK_SIZE << CHUNK_INDEX_BITS
        {
            return bad(format!(
                "sub-region size {:#x} must be a power of two between 4KB and 128GB",
                p.sub_region_size
            ));
        }
        if p.compressed_size == 0 || p.compressed_size % p.sub_region_size != 0 {
            return bad(format!(
                "compressed region size {:#x} must be a positive multiple of the sub-region size {:#x}",
                p.compressed_size, p.sub_region_size
            ));
        }
        if p.compressed_size / p.sub_region_size > MAX_SUB_REGIONS {
            return bad(format!(
                "{} sub-regions exceed the 4-bit sub-region id",
                p.compressed_size / p.sub_region_size
            ));
        }
        if p.promoted_size == 0 || p.promoted_size % PAGE_SIZE != 0 {
            return bad(format!(
                "promoted region size {:#x} must be a positive multiple of 4KB",
                p.promoted_size
            ));
        }
        if p.metadata_pitch_bits == 0 || p.metadata_pitch_bits > 512 {
            return bad("metadata pitch must be within 1..=512 bits".into());
        }
        let advertised = p.advertised_capacity.unwrap_or(2 * p.compressed_size);
        if advertised == 0 || advertised % PAGE_SIZE != 0 {
            return bad(format!("advertised capacity {advertised:#x} must be a positive multiple of 4KB"));
        }
        if advertised >> PAGE_SHIFT > 1 << OSPN_BITS {
            return bad(format!("advertised capacity {advertised:#x} exceeds the 30-bit OSPN range"));
        }

        let pages = advertised / PAGE_SIZE;
        let metadata_size = round_up((pages * p.metadata_pitch_bits).div_ceil(8), PAGE_SIZE);
        let activity_size = round_up(p.promoted_size / PAGE_SIZE * 4, PAGE_SIZE);

        let metadata = Span { base: 0, size: metadata_size };
        let activity = Span { base: metadata.end(), size: activity_size };
        let compressed = Span { base: activity.end(), size: p.compressed_size };
        let promoted = Span { base: compressed.end(), size: p.promoted_size };
        if promoted.end() > p.physical_capacity {
            return bad(format!(
                "regions end at {:#x}, beyond physical capacity {:#x}",
                promoted.end(),
                p.physical_capacity
            ));
        }
        Ok(DeviceLayout {
            physical_capacity: p.physical_capacity,
            advertised_capacity: advertised,
            metadata,
            activity,
            compressed,
            promoted,
            sub_region_size: p.sub_region_size,
            metadata_pitch_bits: p.metadata_pitch_bits,
        })
    }

    pub fn advertised_pages(&self) -> u64 {
        self.advertised_capacity / PAGE_SIZE
    }

    pub fn check_ospn(&self, ospn: u64) -> Result<(), AddrError> {
        if ospn >= self.advertised_pages() {
            return Err(AddrError::AddressFault {
                what: "ospn",
                value: ospn,
                limit: self.advertised_pages(),
            });
        }
        Ok(())
    }

    pub fn check_ospa(&self, ospa: Ospa) -> Result<(), AddrError> {
        if ospa.0 >= self.advertised_capacity {
            return Err(AddrError::AddressFault {
                what: "ospa",
                value: ospa.0,
                limit: self.advertised_capacity,
            });
        }
        Ok(())
    }

    /// Byte address of the metadata slot for `ospn`. With the default 32B
    /// pitch this is `metadata_base + ospn * 32` and two entries share a line.
    pub fn metadata_mpa(&self, ospn: u64) -> Result<Mpa, AddrError> {
        self.check_ospn(ospn)?;
        Ok(Mpa(self.metadata.base + ospn * self.metadata_pitch_bits / 8))
    }

    /// Bit offset of the metadata slot for `ospn` within the metadata region.
    pub fn metadata_bit_offset(&self, ospn: u64) -> u64 {
        ospn * self.metadata_pitch_bits
    }

    /// The 64B lines touched when fetching the entry for `ospn`, as
    /// `(first line address, line count)`.
    pub fn metadata_lines(&self, ospn: u64) -> Result<(Mpa, u64), AddrError> {
        self.check_ospn(ospn)?;
        let first_bit = self.metadata_bit_offset(ospn);
        let last_bit = first_bit + self.metadata_pitch_bits - 1;
        let first_line = first_bit / 512;
        let last_line = last_bit / 512;
        Ok((
            Mpa(self.metadata.base + first_line * LINE_SIZE),
            last_line - first_line + 1,
        ))
    }

    pub fn sub_region_count(&self) -> u64 {
        self.compressed.size / self.sub_region_size
    }

    pub fn chunks_per_sub_region(&self) -> u64 {
        self.sub_region_size / CHUNK_SIZE
    }

    pub fn sub_region_base(&self, sub_region: u8) -> Result<Mpa, AddrError> {
        if u64::from(sub_region) >= self.sub_region_count() {
            return Err(AddrError::AddressFault {
                what: "sub-region",
                value: sub_region.into(),
                limit: self.sub_region_count(),
            });
        }
        Ok(Mpa(self.compressed.base + u64::from(sub_region) * self.sub_region_size))
    }

    pub fn sub_region_of(&self, mpa: Mpa) -> Option<u8> {
        if !self.compressed.contains(mpa.0) {
            return None;
        }
        Some(((mpa.0 - self.compressed.base) / self.sub_region_size) as u8)
    }

    /// Sub-region-relative index of a 512B C-chunk.
    pub fn chunk_index(&self, mpa: Mpa, sub_region: u8) -> Result<u32, AddrError> {
        let base = self.sub_region_base(sub_region)?;
        if !mpa.is_aligned(CHUNK_SIZE) {
            return Err(AddrError::Encoding(format!("C-chunk address {:#x} is not 512B-aligned", mpa.0)));
        }
        if mpa.0 < base.0 || mpa.0 >= base.0 + self.sub_region_size {
            return Err(AddrError::Encoding(format!(
                "C-chunk address {:#x} is outside sub-region {sub_region}",
                mpa.0
            )));
        }
        Ok(((mpa.0 - base.0) >> CHUNK_SHIFT) as u32)
    }

    /// Inverse of [`chunk_index`](Self::chunk_index).
    pub fn chunk_mpa(&self, sub_region: u8, index: u32) -> Result<Mpa, AddrError> {
        let base = self.sub_region_base(sub_region)?;
        if u64::from(index) >= self.chunks_per_sub_region() {
            return Err(AddrError::AddressFault {
                what: "chunk index",
                value: index.into(),
                limit: self.chunks_per_sub_region(),
            });
        }
        Ok(Mpa(base.0 + (u64::from(index) << CHUNK_SHIFT)))
    }

    pub fn pchunk_count(&self) -> u64 {
        self.promoted.size / PAGE_SIZE
    }

    /// Index of a P-chunk within the promoted region (its activity slot).
    pub fn pchunk_index(&self, mpa: Mpa) -> Result<u64, AddrError> {
        if !self.promoted.contains(mpa.0) || !mpa.is_aligned(PAGE_SIZE) {
            return Err(AddrError::Encoding(format!("{:#x} is not a P-chunk address", mpa.0)));
        }
        Ok((mpa.0 - self.promoted.base) / PAGE_SIZE)
    }

    pub fn pchunk_mpa_by_index(&self, index: u64) -> Mpa {
        Mpa(self.promoted.base + index * PAGE_SIZE)
    }

    pub fn activity_word_mpa(&self, pchunk_index: u64) -> Mpa {
        Mpa(self.activity.base + pchunk_index * 4)
    }

    pub fn region_of(&self, mpa: Mpa) -> Option<Region> {
        [
            (self.metadata, Region::Metadata),
            (self.activity, Region::Activity),
            (self.compressed, Region::Compressed),
            (self.promoted, Region::Promoted),
        ]
        .into_iter()
        .find(|(span, _)| span.contains(mpa.0))
        .map(|(_, r)| r)
    }
}

/// Full-space 29-bit pointer to a 4KB P-chunk.
pub fn pchunk_pointer(mpa: Mpa) -> Result<u32, AddrError> {
    if !mpa.is_aligned(PAGE_SIZE) {
        return Err(AddrError::Encoding(format!("P-chunk address {:#x} is not 4KB-aligned", mpa.0)));
    }
    if mpa.0 >= 1 << PHYS_ADDR_BITS {
        return Err(AddrError::AddressFault {
            what: "mpa",
            value: mpa.0,
            limit: 1 << PHYS_ADDR_BITS,
        });
    }
    Ok((mpa.0 >> PAGE_SHIFT) as u32)
}

pub fn pchunk_from_pointer(ptr: u32) -> Mpa {
    Mpa(u64::from(ptr) << PAGE_SHIFT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_layout() -> DeviceLayout {
        DeviceLayout::new(&LayoutParams::default()).unwrap()
    }

    #[test]
    fn default_regions_are_disjoint_and_sized() {
        let l = default_layout();
        assert_eq!(l.advertised_capacity, 256 << 30);
        assert_eq!(l.metadata.size, (256u64 << 30) / 4096 * 32);
        assert_eq!(l.activity.size, (512u64 << 20) / 4096 * 4);
        let spans = [l.metadata, l.activity, l.compressed, l.promoted];
        for w in spans.windows(2) {
            assert!(w[0].end() <= w[1].base);
        }
        for s in spans {
            assert_eq!(s.base % PAGE_SIZE, 0);
        }
        assert_eq!(l.sub_region_count(), 1);
    }

    #[test]
    fn metadata_entries_pair_within_a_line() {
        let l = default_layout();
        let base = l.metadata.base;
        assert_eq!(l.metadata_mpa(0).unwrap(), Mpa(base));
        assert_eq!(l.metadata_mpa(1).unwrap(), Mpa(base + 32));
        assert_eq!(l.metadata_mpa(1).unwrap().line(), l.metadata_mpa(0).unwrap().line());
        assert_eq!(l.metadata_mpa(2).unwrap(), Mpa(base + 64));
        assert_ne!(l.metadata_mpa(2).unwrap().line(), l.metadata_mpa(1).unwrap().line());
        assert!(matches!(
            l.metadata_mpa(l.advertised_pages()),
            Err(AddrError::AddressFault { .. })
        ));
    }

    #[test]
    fn unaligned_pitch_can_cross_lines() {
        let p = LayoutParams {
            metadata_pitch_bits: 283,
            ..LayoutParams::default()
        };
        let l = DeviceLayout::new(&p).unwrap();
        assert_eq!(l.metadata_lines(0).unwrap().1, 1);
        // entry 1 spans bits 283..566, crossing the 512-bit boundary
        assert_eq!(l.metadata_lines(1).unwrap().1, 2);
    }

    #[test]
    fn chunk_index_examples() {
        let p = LayoutParams {
            compressed_size: 2 << 37,
            sub_region_size: 1 << 37,
            ..LayoutParams::default()
        };
        let l = DeviceLayout::new(&p).unwrap();
        let base = l.sub_region_base(1).unwrap();
        assert_eq!(l.chunk_index(base, 1).unwrap(), 0);
        assert_eq!(l.chunk_index(base.offset(512), 1).unwrap(), 1);
        assert_eq!(
            l.chunk_index(base.offset((1 << 37) - 512), 1).unwrap(),
            (1 << 28) - 1
        );
        assert!(l.chunk_index(base.offset(100), 1).is_err());
        assert!(l.chunk_index(base, 0).is_err());
    }

    #[test]
    fn pchunk_pointer_examples() {
        assert_eq!(pchunk_pointer(Mpa(0)).unwrap(), 0);
        assert_eq!(pchunk_pointer(Mpa(4096)).unwrap(), 1);
        assert_eq!(pchunk_pointer(Mpa((1 << 41) - 4096)).unwrap(), (1 << 29) - 1);
        assert!(pchunk_pointer(Mpa(512)).is_err());
    }

    #[test]
    fn rejects_bad_layouts() {
        let cases = [
            LayoutParams { sub_region_size: 3 << 20, ..LayoutParams::default() },
            LayoutParams { compressed_size: (128 << 30) + 4096, ..LayoutParams::default() },
            LayoutParams { promoted_size: 100, ..LayoutParams::default() },
            LayoutParams {
                compressed_size: 17 << 20,
                sub_region_size: 1 << 20,
                ..LayoutParams::default()
            },
        ];
        for p in cases {
            assert!(DeviceLayout::new(&p).is_err(), "{p:?}");
        }
    }

    proptest! {
        #[test]
        fn chunk_index_round_trips(sub in 0u8..4, idx in 0u32..(1 << 16)) {
            let p = LayoutParams {
                compressed_size: 4 << 25,
                sub_region_size: 1 << 25,
                ..LayoutParams::default()
            };
            let l = DeviceLayout::new(&p).unwrap();
            let mpa = l.chunk_mpa(sub, idx).unwrap();
            prop_assert_eq!(l.chunk_index(mpa, sub).unwrap(), idx);
            prop_assert_eq!(l.sub_region_of(mpa), Some(sub));
            prop_assert_eq!(l.region_of(mpa), Some(Region::Compressed));
        }

        #[test]
        fn pchunk_pointer_round_trips(page in 0u64..(1 << 29)) {
            let mpa = Mpa(page << 12);
            prop_assert_eq!(pchunk_from_pointer(pchunk_pointer(mpa).unwrap()), mpa);
        }

        #[test]
        fn every_region_address_has_one_region(off in 0u64..(130u64 << 30)) {
            let l = default_layout();
            let hits = [l.metadata, l.activity, l.compressed, l.promoted]
                .iter()
                .filter(|s| s.contains(off))
                .count();
            prop_assert!(hits <= 1);
            prop_assert_eq!(hits == 1, l.region_of(Mpa(off)).is_some());
        }
    }
}
