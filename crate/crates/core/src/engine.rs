//! Device-side request pipeline: translation, decompression, promotion,
//! shadow management, write-counter recompression and demotion.
//!
//! The engine is functional as well as timed. Every byte the host writes is
//! kept in the sparse store in its current (compressed or promoted) form, so
//! a trace can be replayed and read back against a flat reference.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::activity::{ActivityTracker, Victim};
use crate::addr::{DeviceLayout, Mpa, Ospa, BLOCK_SIZE, CHUNK_SIZE, LINE_SIZE, PAGE_SIZE};
use crate::alloc::ChunkAllocator;
use crate::compress::{
    classify_and_compress, unpack, BackendKind, CompressionMode, Compressor, LatencyModel, PackedPage, PackedPageLayout,
};
use crate::error::{Result, SimError};
use crate::memory::DeviceMemory;
use crate::meta_cache::{MetaCache, MetaCacheConfig};
use crate::metadata::{ChunkList, MetadataFormat, PageEntry, PageType, WR_CNTR_LIMIT};
use crate::telemetry::Category;
use crate::timing::{ChannelModel, Time};
use crate::workload::Op;

const PAGE: usize = PAGE_SIZE as usize;
const BLOCK: usize = BLOCK_SIZE as usize;
const CHUNK: usize = CHUNK_SIZE as usize;
const LINES_PER_BLOCK: u64 = BLOCK_SIZE / LINE_SIZE;
const LINES_PER_CHUNK: u64 = CHUNK_SIZE / LINE_SIZE;

pub type Line = [u8; LINE_SIZE as usize];

/// What to do when no sub-region can hold a page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExhaustionPolicy {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: CompressionMode,
    pub format: MetadataFormat,
    pub shadowed_promotion: bool,
    pub backend: BackendKind,
    pub latency: LatencyModel,
    pub cache: MetaCacheConfig,
    pub demotion_threshold: u64,
    pub exhaustion: ExhaustionPolicy,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: CompressionMode::Colocated1k,
            format: MetadataFormat::Compact,
            shadowed_promotion: true,
            backend: BackendKind::Lz77,
            latency: LatencyModel::default(),
            cache: MetaCacheConfig::default(),
            demotion_threshold: crate::alloc::DEMOTION_THRESHOLD,
            exhaustion: ExhaustionPolicy::Abort,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub reads: u64,
    pub writes: u64,
    pub zero_reads: u64,
    /// Blocks (or whole pages in page4k mode) moved into a P-chunk.
    pub block_promotions: u64,
    pub pchunk_allocations: u64,
    /// Promotions that had to wait for an inline demotion.
    pub promotion_stalls: u64,
    pub clean_demotions: u64,
    pub dirty_demotions: u64,
    /// Compressions performed on the demotion path.
    pub demotion_compressions: u64,
    pub failed_demotions: u64,
    /// Pages whose shadow chunks were dropped by a write.
    pub shadow_invalidations: u64,
    pub shadow_chunks_freed: u64,
    pub recompression_attempts: u64,
    pub recompressions: u64,
    pub skipped_pages: u64,
    /// Chunk count -> compressions producing it.
    pub compressed_size_histogram: BTreeMap<usize, u64>,
}

/// One cached metadata line: the entries of one (naive, co-located) or two
/// (compact) consecutive pages.
#[derive(Debug, Clone, Copy)]
struct MetaLine {
    entries: [Option<PageEntry>; 2],
}

/// Result of one host request at the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Response {
    pub done: Time,
    pub data: Option<Line>,
}

pub struct Engine {
    cfg: EngineConfig,
    layout: DeviceLayout,
    mem: DeviceMemory,
    alloc: ChunkAllocator,
    cache: MetaCache<MetaLine>,
    activity: ActivityTracker,
    backend: Box<dyn Compressor>,
    hit_ps: Time,
    nonzero: BTreeSet<u64>,
    stats: EngineStats,
}

fn line_key(format: MetadataFormat, ospn: u64) -> u64 {
    match format {
        MetadataFormat::Compact => ospn >> 1,
        _ => ospn,
    }
}

impl Engine {
    pub fn new(cfg: EngineConfig, layout: DeviceLayout, channels: ChannelModel) -> Result<Self> {
        if layout.metadata_pitch_bits != cfg.format.pitch_bits() {
            return Err(SimError::Config(format!(
                "layout metadata pitch {} does not match the {} format ({} bits)",
                layout.metadata_pitch_bits,
                cfg.format.name(),
                cfg.format.pitch_bits()
            )));
        }
        match (cfg.mode, cfg.format) {
            (CompressionMode::Page4k, MetadataFormat::Naive)
            | (CompressionMode::Colocated1k, MetadataFormat::Colocated | MetadataFormat::Compact) => {}
            (m, f) => {
                return Err(SimError::Config(format!("{} mode cannot use the {} format", m.name(), f.name())));
            }
        }
        if cfg.cache.sets() == 0 {
            return Err(SimError::Config("metadata cache has no sets".into()));
        }
        Ok(Engine {
            hit_ps: cfg.cache.hit_cycles * cfg.latency.cycle_ps,
            mem: DeviceMemory::new(channels, Some(layout.clone())),
            alloc: ChunkAllocator::new(&layout, cfg.demotion_threshold),
            cache: MetaCache::new(&cfg.cache),
            activity: ActivityTracker::new(&layout, cfg.seed),
            backend: cfg.backend.build(),
            layout,
            cfg,
            nonzero: BTreeSet::new(),
            stats: EngineStats::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &DeviceLayout {
        &self.layout
    }

    pub fn memory(&self) -> &DeviceMemory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut DeviceMemory {
        &mut self.mem
    }

    pub fn allocator(&self) -> &ChunkAllocator {
        &self.alloc
    }

    pub fn activity(&self) -> &ActivityTracker {
        &self.activity
    }

    pub fn activity_mut(&mut self) -> &mut ActivityTracker {
        &mut self.activity
    }

    pub fn cache_stats(&self) -> crate::meta_cache::CacheStats {
        self.cache.stats()
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn needs_demotion(&self) -> bool {
        self.alloc.needs_demotion() && self.activity.allocated() > 0
    }

    /// Non-zero pages times 4KB.
    pub fn allocated_bytes(&self) -> u64 {
        self.nonzero.len() as u64 * PAGE_SIZE
    }

    /// C-chunks and P-chunks in use, shadows included.
    pub fn physical_bytes(&self) -> u64 {
        self.alloc.cchunk_in_use() * CHUNK_SIZE + self.alloc.pchunk_in_use() * PAGE_SIZE
    }

    pub fn shadow_bytes(&self) -> u64 {
        self.nonzero
            .iter()
            .map(|&o| self.peek_entry(o).map_or(0, |e| e.shadow_chunks() as u64 * CHUNK_SIZE))
            .sum()
    }

    fn key(&self, ospn: u64) -> u64 {
        line_key(self.cfg.format, ospn)
    }

    fn slot(&self, ospn: u64) -> usize {
        match self.cfg.format {
            MetadataFormat::Compact => (ospn & 1) as usize,
            _ => 0,
        }
    }

    // ---- metadata region storage -------------------------------------

    fn read_stored(&self, ospn: u64) -> Result<PageEntry> {
        let f = self.cfg.format;
        let bit = self.layout.metadata_bit_offset(ospn);
        let len = f.encoded_len();
        let sh = (bit % 8) as u32;
        let raw = self.mem.store.read_vec(Mpa(self.layout.metadata.base + bit / 8), len + 1);
        let mut out: Vec<u8> = (0..len)
            .map(|i| if sh == 0 { raw[i] } else { (raw[i] >> sh) | (raw[i + 1] << (8 - sh)) })
            .collect();
        let extra = (len * 8) as u64 - f.pitch_bits();
        if extra > 0 {
            out[len - 1] &= 0xffu8 >> extra;
        }
        Ok(f.decode(&out, &self.layout)?)
    }

    fn write_stored(&mut self, ospn: u64, e: &PageEntry) -> Result<()> {
        let f = self.cfg.format;
        let data = f.encode(e, &self.layout)?;
        let bit = self.layout.metadata_bit_offset(ospn);
        let len = data.len();
        let sh = (bit % 8) as u32;
        let at = Mpa(self.layout.metadata.base + bit / 8);
        let mut raw = self.mem.store.read_vec(at, len + 1);
        let pitch = f.pitch_bits() as usize;
        let shift = |src: &dyn Fn(usize) -> u8, i: usize| -> u8 {
            let lo = if i < len { src(i) << sh } else { 0 };
            let hi = if i > 0 && sh > 0 { src(i - 1) >> (8 - sh) } else { 0 };
            lo | hi
        };
        let ones = |i: usize| -> u8 {
            let bits = pitch.saturating_sub(i * 8).min(8);
            if bits == 8 {
                0xff
            } else {
                (1u8 << bits) - 1
            }
        };
        let val = |i: usize| data[i];
        for (i, r) in raw.iter_mut().enumerate() {
            let m = shift(&ones, i);
            *r = (*r & !m) | (shift(&val, i) & m);
        }
        self.mem.store.write(at, &raw);
        Ok(())
    }

    fn peek_entry(&self, ospn: u64) -> Option<PageEntry> {
        match self.cache.peek(self.key(ospn)) {
            Some(l) => l.entries[self.slot(ospn)],
            None => self.read_stored(ospn).ok(),
        }
    }

    /// Current entry without timing or cache effects.
    pub fn entry(&self, ospn: u64) -> Result<PageEntry> {
        self.layout.check_ospn(ospn)?;
        match self.cache.peek(self.key(ospn)) {
            Some(l) => Ok(l.entries[self.slot(ospn)].expect("resident slot")),
            None => self.read_stored(ospn),
        }
    }

    fn line_ospns(&self, key: u64) -> Range<u64> {
        let pages = self.layout.advertised_pages();
        match self.cfg.format {
            MetadataFormat::Compact => key * 2..(key * 2 + 2).min(pages),
            _ => key..key + 1,
        }
    }

    fn metadata_span(&self, ospn: u64) -> (Mpa, u64) {
        self.layout.metadata_lines(ospn).expect("ospn checked")
    }

    /// Demand lookup through the metadata cache.
    fn fetch_meta(&mut self, ospn: u64, now: Time) -> Result<(PageEntry, Time)> {
        let key = self.key(ospn);
        let slot = self.slot(ospn);
        if let Some(l) = self.cache.lookup(key) {
            return Ok((l.entries[slot].expect("resident slot"), now + self.hit_ps));
        }
        let (line, n) = self.metadata_span(ospn);
        let t = self.mem.access_lines(line, n, Category::MetadataRead, now);
        let mut entries = [None, None];
        for (i, o) in self.line_ospns(key).enumerate() {
            entries[i] = Some(self.read_stored(o)?);
        }
        let e = entries[slot].expect("requested slot");
        if let Some(ev) = self.cache.insert(key, MetaLine { entries }, false) {
            self.on_evict(ev.key, ev.value, ev.dirty, now)?;
        }
        Ok((e, t + self.hit_ps))
    }

    fn on_evict(&mut self, key: u64, line: MetaLine, dirty: bool, now: Time) -> Result<()> {
        let ospns = self.line_ospns(key);
        for (o, e) in ospns.clone().zip(line.entries) {
            let Some(e) = e else { continue };
            if let Some(p) = e.pchunk {
                let idx = self.layout.pchunk_index(p)?;
                self.activity.mark_referenced(&mut self.mem, idx, now);
            }
            if dirty {
                self.write_stored(o, &e)?;
            }
        }
        if dirty {
            let (first, n) = self.metadata_span(ospns.start);
            let (last, m) = self.metadata_span(ospns.end - 1);
            let lines = (last.0 + m * LINE_SIZE - first.0) / LINE_SIZE;
            debug_assert!(lines >= n);
            self.mem.access_lines(first, lines, Category::MetadataWrite, now);
        }
        Ok(())
    }

    /// Replaces the entry of a resident page and dirties its line.
    fn commit(&mut self, ospn: u64, e: PageEntry) {
        let key = self.key(ospn);
        let slot = self.slot(ospn);
        let line = self.cache.peek_mut(key).expect("page metadata resident during its request");
        line.entries[slot] = Some(e);
        self.cache.mark_dirty(key);
        self.track(ospn, &e);
    }

    fn track(&mut self, ospn: u64, e: &PageEntry) {
        if e.is_zero_page() {
            self.nonzero.remove(&ospn);
        } else {
            self.nonzero.insert(ospn);
        }
    }

    /// Writes every dirty cached entry back to the metadata region without
    /// charging traffic. Used before snapshots.
    pub fn flush_metadata(&mut self) -> Result<()> {
        let lines: Vec<(u64, MetaLine)> =
            self.cache.lines().into_iter().filter(|l| l.2).map(|(k, v, _)| (k, *v)).collect();
        for (k, l) in lines {
            for (o, e) in self.line_ospns(k).zip(l.entries) {
                if let Some(e) = e {
                    self.write_stored(o, &e)?;
                }
            }
        }
        Ok(())
    }

    /// Pages with a non-zero entry, ascending.
    pub fn nonzero_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.nonzero.iter().copied()
    }

    // ---- data movement helpers -----------------------------------------

    fn packed_layout(&self, e: &PageEntry) -> PackedPageLayout {
        PackedPageLayout::for_entry(self.cfg.mode, &e.blocks, e.chunks.len())
    }

    /// Block indices forming the promotion unit containing block `bi`.
    fn unit(&self, bi: usize) -> Range<usize> {
        match self.cfg.mode {
            CompressionMode::Page4k => 0..4,
            CompressionMode::Colocated1k => bi..bi + 1,
        }
    }

    fn read_chunk_image(&self, e: &PageEntry, r: Range<usize>) -> Vec<u8> {
        let mut img = vec![0u8; r.len() * CHUNK];
        for (k, ord) in r.enumerate() {
            self.mem.store.read(e.chunks.as_slice()[ord], &mut img[k * CHUNK..(k + 1) * CHUNK]);
        }
        img
    }

    fn access_chunks(&mut self, e: &PageEntry, r: Range<usize>, cat: Category, now: Time) -> Time {
        let mut t = now;
        for ord in r {
            t = t.max(self.mem.access_lines(e.chunks.as_slice()[ord], LINES_PER_CHUNK, cat, now));
        }
        t
    }

    /// Decoded bytes of the unit holding chunk-resident block `bi`, with the
    /// fetch and decompression charged under `cat`.
    fn fetch_unit(&mut self, e: &PageEntry, bi: usize, cat: Category, now: Time) -> Result<(Vec<u8>, Time)> {
        let layout = self.packed_layout(e);
        let r = layout.blocks_to_fetch(bi);
        let t = self.access_chunks(e, r.clone(), cat, now);
        let data = self.decode_unit(e, &layout, bi, r)?;
        let lat = match (self.cfg.mode, e.blocks[bi].kind) {
            (CompressionMode::Page4k, PageType::Compressed) => self.cfg.latency.decompress_ps(PAGE),
            (CompressionMode::Colocated1k, PageType::Compressed | PageType::Promoted) => {
                let (_, size) = layout.slots[bi].expect("chunk-resident");
                self.cfg.latency.decompress_ps(size)
            }
            _ => 0,
        };
        Ok((data, t + lat))
    }

    fn decode_unit(&self, e: &PageEntry, layout: &PackedPageLayout, bi: usize, r: Range<usize>) -> Result<Vec<u8>> {
        let img = self.read_chunk_image(e, r.clone());
        let mut blocks = e.blocks;
        // Shadowed blocks decode like the compressed blocks they were.
        for b in &mut blocks {
            if b.kind == PageType::Promoted {
                b.kind = restored_kind(self.cfg.mode, b.size_code);
            }
        }
        Ok(unpack(&img, r.start, &blocks, layout, self.cfg.mode, bi, self.backend.as_ref())?)
    }

    fn unit_offset(&self, bi: usize) -> u64 {
        self.unit(bi).start as u64 * BLOCK_SIZE
    }

    /// Gets a P-chunk for `ospn`, demoting inline when the region is empty.
    fn ensure_pchunk(&mut self, ospn: u64, e: &mut PageEntry, now: Time) -> Result<Time> {
        if e.pchunk.is_some() {
            return Ok(now);
        }
        let mut t = now;
        let (p, t_alloc) = loop {
            if let Some(x) = self.alloc.alloc_pchunk(&mut self.mem, t) {
                break x;
            }
            self.stats.promotion_stalls += 1;
            t = match self.demote_one(t)? {
                Some(done) if self.alloc.pchunk_free() > 0 => done,
                _ => return Err(SimError::CapacityExhausted { needed: 8 }),
            };
        };
        e.pchunk = Some(p);
        self.stats.pchunk_allocations += 1;
        let idx = self.layout.pchunk_index(p)?;
        self.activity.on_promote(&mut self.mem, idx, ospn, t_alloc);
        Ok(t_alloc)
    }

    /// Writes unit data into the P-chunk and marks its blocks promoted.
    fn place_unit(&mut self, e: &mut PageEntry, bi: usize, data: &[u8], now: Time) -> Time {
        let p = e.pchunk.expect("P-chunk allocated");
        let at = p.offset(self.unit_offset(bi));
        self.mem.store.write(at, data);
        let t = self.mem.access_lines(at, data.len() as u64 / LINE_SIZE, Category::PromotionWrite, now);
        for b in self.unit(bi) {
            e.blocks[b].kind = PageType::Promoted;
        }
        self.stats.block_promotions += 1;
        t
    }

    /// Moves every block still living only in C-chunks into the P-chunk and
    /// frees all C-chunks. Afterwards the page is promoted-dirty.
    fn drop_shadows(&mut self, e: &mut PageEntry, now: Time) -> Result<Time> {
        if e.chunks.is_empty() {
            return Ok(now);
        }
        let mut t = now;
        for bi in 0..4 {
            if matches!(e.blocks[bi].kind, PageType::Compressed | PageType::Incompressible) && self.unit(bi).start == bi {
                let (data, td) = self.fetch_unit(e, bi, Category::PromotionRead, now)?;
                t = t.max(self.place_unit(e, bi, &data, td));
            }
        }
        let freed = e.chunks;
        e.chunks.clear();
        for b in e.blocks.iter_mut() {
            b.size_code = 0;
        }
        self.stats.shadow_invalidations += 1;
        self.stats.shadow_chunks_freed += freed.len() as u64;
        Ok(t.max(self.alloc.free_cchunks(freed.as_slice(), &mut self.mem, now)))
    }

    /// Promotes the chunk-resident unit holding `bi` whose bytes are `data`.
    fn promote(&mut self, ospn: u64, e: &mut PageEntry, bi: usize, data: &[u8], now: Time) -> Result<Time> {
        let t = self.ensure_pchunk(ospn, e, now)?;
        let mut done = self.place_unit(e, bi, data, t);
        if !self.cfg.shadowed_promotion {
            done = done.max(self.drop_shadows(e, t)?);
        }
        Ok(done)
    }

    fn record_size(&mut self, p: &PackedPage) {
        *self.stats.compressed_size_histogram.entry(p.chunk_count).or_insert(0) += 1;
    }

    fn compress_ps(&self, page: &[u8]) -> Time {
        match self.cfg.mode {
            CompressionMode::Page4k => self.cfg.latency.compress_ps(PAGE),
            CompressionMode::Colocated1k => {
                let live = page.chunks(BLOCK).filter(|b| b.iter().any(|&x| x != 0)).count();
                self.cfg.latency.compress_ps(live * BLOCK)
            }
        }
    }

    fn alloc_for(&mut self, n: usize, now: Time) -> Result<Option<(ChunkList, Time)>> {
        match self.alloc.alloc_cchunks(n, &mut self.mem, now) {
            Ok((_, c, t)) => Ok(Some((c, t))),
            Err(e @ SimError::CapacityExhausted { .. }) => match self.cfg.exhaustion {
                ExhaustionPolicy::Abort => Err(e),
                ExhaustionPolicy::Skip => Ok(None),
            },
            Err(e) => Err(e),
        }
    }

    fn write_image(&mut self, chunks: &ChunkList, image: &[u8], cat: Category, now: Time) -> Time {
        let mut t = now;
        for (k, &c) in chunks.as_slice().iter().enumerate() {
            self.mem.store.write(c, &image[k * CHUNK..(k + 1) * CHUNK]);
            t = t.max(self.mem.access_lines(c, LINES_PER_CHUNK, cat, now));
        }
        t
    }

    // ---- public operations ------------------------------------------------

    /// Installs initial page content at no cost (no traffic, no time).
    pub fn preload(&mut self, ospn: u64, page: &[u8]) -> Result<()> {
        self.layout.check_ospn(ospn)?;
        let cur = self.entry(ospn)?;
        if !cur.is_zero_page() {
            return Err(SimError::Contract(format!("page {ospn} preloaded twice")));
        }
        let packed = classify_and_compress(page, self.cfg.mode, self.backend.as_ref());
        self.record_size(&packed);
        if packed.is_zero() {
            return Ok(());
        }
        self.mem.set_quiet(true);
        let got = self.alloc_for(packed.chunk_count, 0);
        let chunks = match got {
            Ok(Some((c, _))) => {
                self.write_image(&c, &packed.image, Category::DemotionWrite, 0);
                Some(c)
            }
            Ok(None) => None,
            Err(e) => {
                self.mem.set_quiet(false);
                return Err(e);
            }
        };
        self.mem.set_quiet(false);
        let Some(chunks) = chunks else {
            self.stats.skipped_pages += 1;
            return Ok(());
        };
        let e = PageEntry { blocks: packed.blocks, chunks, pchunk: None, wr_cntr: 0 };
        match self.cache.peek(self.key(ospn)).is_some() {
            true => {
                let (key, slot) = (self.key(ospn), self.slot(ospn));
                self.cache.peek_mut(key).expect("resident").entries[slot] = Some(e);
                self.cache.mark_dirty(key);
            }
            false => self.write_stored(ospn, &e)?,
        }
        self.track(ospn, &e);
        Ok(())
    }

    /// Serves one 64B request arriving at `now`.
    pub fn handle(&mut self, op: Op, ospa: Ospa, payload: Option<&Line>, now: Time) -> Result<Response> {
        self.layout.check_ospa(ospa)?;
        let ospa = ospa.line_aligned();
        match op {
            Op::Read => {
                self.stats.reads += 1;
                self.read(ospa, now)
            }
            Op::Write => {
                self.stats.writes += 1;
                let done = self.write(ospa, payload, now)?;
                Ok(Response { done, data: None })
            }
        }
    }

    fn read_line_at(&self, at: Mpa) -> Line {
        let mut l = [0u8; LINE_SIZE as usize];
        self.mem.store.read(at, &mut l);
        l
    }

    /// Location of a line of a chunk-resident raw block.
    fn raw_line_mpa(&self, e: &PageEntry, off: u64) -> Mpa {
        let pos = match self.cfg.mode {
            CompressionMode::Page4k => off as usize,
            CompressionMode::Colocated1k => {
                let bi = (off / BLOCK_SIZE) as usize;
                let (slot, _) = self.packed_layout(e).slots[bi].expect("raw block in chunks");
                slot + (off % BLOCK_SIZE) as usize
            }
        };
        e.chunks.as_slice()[pos / CHUNK].offset((pos % CHUNK) as u64)
    }

    fn read(&mut self, ospa: Ospa, now: Time) -> Result<Response> {
        let ospn = ospa.ospn();
        let off = ospa.page_offset();
        let bi = (off / BLOCK_SIZE) as usize;
        let (mut e, t) = self.fetch_meta(ospn, now)?;
        match e.blocks[bi].kind {
            PageType::Zero => {
                self.stats.zero_reads += 1;
                self.mem.traffic_mut().zero_served += 1;
                Ok(Response { done: t, data: Some([0; LINE_SIZE as usize]) })
            }
            PageType::Promoted => {
                let at = e.pchunk.expect("promoted block has a P-chunk").offset(off);
                let done = self.mem.access(at, Category::ExternalData, t);
                Ok(Response { done, data: Some(self.read_line_at(at)) })
            }
            PageType::Incompressible => {
                let at = self.raw_line_mpa(&e, off);
                let done = self.mem.access(at, Category::ExternalData, t);
                Ok(Response { done, data: Some(self.read_line_at(at)) })
            }
            PageType::Compressed => {
                let (data, t_resp) = self.fetch_unit(&e, bi, Category::ExternalData, t)?;
                let within = (off - self.unit_offset(bi)) as usize;
                let mut line = [0u8; LINE_SIZE as usize];
                line.copy_from_slice(&data[within..within + LINE_SIZE as usize]);
                self.promote(ospn, &mut e, bi, &data, t_resp)?;
                self.commit(ospn, e);
                Ok(Response { done: t_resp, data: Some(line) })
            }
        }
    }

    fn write(&mut self, ospa: Ospa, payload: Option<&Line>, now: Time) -> Result<Time> {
        let ospn = ospa.ospn();
        let off = ospa.page_offset();
        let bi = (off / BLOCK_SIZE) as usize;
        let (mut e, t) = self.fetch_meta(ospn, now)?;
        let kind = e.blocks[bi].kind;
        if kind == PageType::Incompressible {
            let at = self.raw_line_mpa(&e, off);
            if let Some(p) = payload {
                self.mem.store.write(at, p);
            }
            let done = self.mem.access(at, Category::ExternalData, t);
            e.wr_cntr += 1;
            if e.wr_cntr >= WR_CNTR_LIMIT {
                e.wr_cntr = 0;
                if e.pchunk.is_none() {
                    self.recompress(&mut e, done)?;
                }
            }
            self.commit(ospn, e);
            return Ok(done);
        }
        let mut t = t;
        match kind {
            PageType::Zero => {
                if payload.is_none_or(|p| p.iter().all(|&b| b == 0)) {
                    self.mem.traffic_mut().zero_served += 1;
                    return Ok(t);
                }
                t = self.ensure_pchunk(ospn, &mut e, t)?;
                // Shadows go first: a Promoted block in a page with chunks
                // must own a slot in the packed stream.
                t = self.drop_shadows(&mut e, t)?;
                let unit = self.unit(bi);
                let zeros = vec![0u8; unit.len() * BLOCK];
                // the line about to be written is not zero-filled
                let base = e.pchunk.expect("allocated").offset(self.unit_offset(bi));
                self.mem.store.write(base, &zeros);
                let skip = (off - self.unit_offset(bi)) / LINE_SIZE;
                let mut tz = t;
                for l in 0..zeros.len() as u64 / LINE_SIZE {
                    if l != skip {
                        tz = tz.max(self.mem.access(base.offset(l * LINE_SIZE), Category::PromotionWrite, t));
                    }
                }
                for b in unit {
                    e.blocks[b].kind = PageType::Promoted;
                }
                self.stats.block_promotions += 1;
            }
            PageType::Compressed => {
                let (data, td) = self.fetch_unit(&e, bi, Category::PromotionRead, t)?;
                t = self.promote(ospn, &mut e, bi, &data, td)?;
            }
            PageType::Promoted | PageType::Incompressible => {}
        }
        t = self.drop_shadows(&mut e, t)?;
        let at = e.pchunk.expect("written block is promoted").offset(off);
        if let Some(p) = payload {
            self.mem.store.write(at, p);
        }
        let done = self.mem.access(at, Category::ExternalData, t);
        self.commit(ospn, e);
        Ok(done)
    }

    /// Write-counter triggered recompression of a page with raw blocks.
    fn recompress(&mut self, e: &mut PageEntry, now: Time) -> Result<()> {
        self.stats.recompression_attempts += 1;
        let n = e.chunks.len();
        let t = self.access_chunks(e, 0..n, Category::DemotionRead, now);
        let page = self.page_from_chunks(e)?;
        let raw_bytes = match self.cfg.mode {
            CompressionMode::Page4k => PAGE,
            CompressionMode::Colocated1k => {
                e.blocks.iter().filter(|b| b.kind == PageType::Incompressible).count() * BLOCK
            }
        };
        let t = t + self.cfg.latency.compress_ps(raw_bytes);
        let packed = classify_and_compress(&page, self.cfg.mode, self.backend.as_ref());
        if packed.chunk_count >= n {
            return Ok(());
        }
        self.record_size(&packed);
        let old = e.chunks;
        let chunks = if packed.is_zero() {
            ChunkList::new()
        } else {
            match self.alloc_for(packed.chunk_count, t)? {
                Some((c, ta)) => {
                    self.write_image(&c, &packed.image, Category::DemotionWrite, ta);
                    c
                }
                None => return Ok(()),
            }
        };
        self.alloc.free_cchunks(old.as_slice(), &mut self.mem, t);
        e.blocks = packed.blocks;
        e.chunks = chunks;
        self.stats.recompressions += 1;
        Ok(())
    }

    /// Full page content of a page stored only in C-chunks.
    fn page_from_chunks(&self, e: &PageEntry) -> Result<Vec<u8>> {
        let layout = self.packed_layout(e);
        let mut page = vec![0u8; PAGE];
        for bi in 0..4 {
            if self.unit(bi).start != bi || layout.slots[bi].is_none() {
                continue;
            }
            let r = layout.blocks_to_fetch(bi);
            let data = self.decode_unit(e, &layout, bi, r)?;
            let o = self.unit_offset(bi) as usize;
            page[o..o + data.len()].copy_from_slice(&data);
        }
        Ok(page)
    }

    /// Selects and demotes one victim. `None` when nothing is promoted.
    pub fn demote_one(&mut self, now: Time) -> Result<Option<Time>> {
        if self.activity.allocated() == 0 {
            return Ok(None);
        }
        let format = self.cfg.format;
        let cache = &mut self.cache;
        let (v, t) = self.activity.select_victim(&mut self.mem, &mut |o| cache.probe(line_key(format, o)), now)?;
        let cached = self.cache.contains(self.key(v.ospn));
        let (mut e, mut t) = if cached {
            (self.entry(v.ospn)?, t + self.hit_ps)
        } else {
            let (line, n) = self.metadata_span(v.ospn);
            (self.read_stored(v.ospn)?, self.mem.access_lines(line, n, Category::MetadataRead, t))
        };
        let p = self.layout.pchunk_mpa_by_index(v.pchunk_index);
        if e.pchunk != Some(p) {
            return Err(SimError::Contract(format!(
                "activity entry {} names page {} whose metadata does not point back",
                v.pchunk_index, v.ospn
            )));
        }
        if e.is_clean_promoted() {
            for b in &mut e.blocks {
                if b.kind == PageType::Promoted {
                    b.kind = restored_kind(self.cfg.mode, b.size_code);
                }
            }
            self.stats.clean_demotions += 1;
        } else {
            match self.demote_dirty(&mut e, &v, t)? {
                Some(done) => t = done,
                None => {
                    self.activity.restore(&mut self.mem, &v, t);
                    self.stats.failed_demotions += 1;
                    return Ok(Some(t));
                }
            }
            self.stats.dirty_demotions += 1;
        }
        e.pchunk = None;
        let tf = self.alloc.free_pchunk(p, &mut self.mem, t);
        if cached {
            let (key, slot) = (self.key(v.ospn), self.slot(v.ospn));
            self.cache.peek_mut(key).expect("resident").entries[slot] = Some(e);
            self.cache.mark_dirty(key);
        } else {
            self.write_stored(v.ospn, &e)?;
            let (line, n) = self.metadata_span(v.ospn);
            t = t.max(self.mem.access_lines(line, n, Category::MetadataWrite, t));
        }
        self.track(v.ospn, &e);
        Ok(Some(t.max(tf)))
    }

    /// Recompresses a dirty promoted page into fresh C-chunks. `None` when
    /// the chunks could not be allocated under the skip policy.
    fn demote_dirty(&mut self, e: &mut PageEntry, v: &Victim, now: Time) -> Result<Option<Time>> {
        let p = e.pchunk.expect("victim is promoted");
        let mut page = vec![0u8; PAGE];
        let mut t = now;
        for bi in 0..4 {
            if e.blocks[bi].kind == PageType::Promoted {
                let at = p.offset(bi as u64 * BLOCK_SIZE);
                self.mem.store.read(at, &mut page[bi * BLOCK..(bi + 1) * BLOCK]);
                t = t.max(self.mem.access_lines(at, LINES_PER_BLOCK, Category::DemotionRead, now));
            }
        }
        debug_assert!(e.chunks.is_empty(), "page {} is dirty", v.ospn);
        let t = t + self.compress_ps(&page);
        self.stats.demotion_compressions += 1;
        let packed = classify_and_compress(&page, self.cfg.mode, self.backend.as_ref());
        self.record_size(&packed);
        let mut done = t;
        if !packed.is_zero() {
            let Some((chunks, ta)) = self.alloc_for(packed.chunk_count, t)? else {
                return Ok(None);
            };
            done = self.write_image(&chunks, &packed.image, Category::DemotionWrite, ta);
            e.chunks = chunks;
        }
        e.blocks = packed.blocks;
        e.wr_cntr = 0;
        Ok(Some(done))
    }

    /// Current content of one line, without timing or side effects.
    pub fn read_line_functional(&self, ospa: Ospa) -> Result<Line> {
        self.layout.check_ospa(ospa)?;
        let ospa = ospa.line_aligned();
        let off = ospa.page_offset();
        let bi = (off / BLOCK_SIZE) as usize;
        let e = self.entry(ospa.ospn())?;
        Ok(match e.blocks[bi].kind {
            PageType::Zero => [0; LINE_SIZE as usize],
            PageType::Promoted => self.read_line_at(e.pchunk.expect("promoted").offset(off)),
            PageType::Incompressible => self.read_line_at(self.raw_line_mpa(&e, off)),
            PageType::Compressed => {
                let layout = self.packed_layout(&e);
                let data = self.decode_unit(&e, &layout, bi, layout.blocks_to_fetch(bi))?;
                let within = (off - self.unit_offset(bi)) as usize;
                let mut l = [0u8; LINE_SIZE as usize];
                l.copy_from_slice(&data[within..within + LINE_SIZE as usize]);
                l
            }
        })
    }

    /// Cross-module consistency: free lists, chunk ownership, activity
    /// entries and the shadow duplication bound.
    pub fn audit(&self) -> std::result::Result<(), String> {
        self.alloc.audit(&self.mem)?;
        let mut cchunks = 0u64;
        let mut pchunks = 0u64;
        let mut seen = BTreeSet::new();
        for &o in &self.nonzero {
            let e = self.entry(o).map_err(|x| x.to_string())?;
            self.cfg.format.encode(&e, &self.layout).map_err(|x| format!("page {o}: {x}"))?;
            if !e.chunks.is_empty() && self.packed_layout(&e).chunk_count != e.chunks.len() {
                return Err(format!("page {o}: block sizes disagree with {} chunks", e.chunks.len()));
            }
            for &c in e.chunks.as_slice() {
                if !seen.insert(c.0) || self.alloc.is_cchunk_free(c) {
                    return Err(format!("page {o}: chunk {:#x} doubly owned or free", c.0));
                }
                let same = self.layout.sub_region_of(c) == self.layout.sub_region_of(e.chunks.as_slice()[0]);
                if !same {
                    return Err(format!("page {o}: chunks span sub-regions"));
                }
            }
            cchunks += e.chunks.len() as u64;
            if let Some(p) = e.pchunk {
                pchunks += 1;
                let idx = self.layout.pchunk_index(p).map_err(|x| x.to_string())?;
                let a = self.activity.entry(&self.mem, idx);
                if !a.allocated || u64::from(a.ospn) != o {
                    return Err(format!("page {o}: activity entry {idx} is {a:?}"));
                }
            }
        }
        if cchunks != self.alloc.cchunk_in_use() {
            return Err(format!("{cchunks} owned C-chunks vs {} allocated", self.alloc.cchunk_in_use()));
        }
        if pchunks != self.alloc.pchunk_in_use() || pchunks != self.activity.allocated() {
            return Err(format!(
                "{pchunks} promoted pages, {} P-chunks allocated, {} activity entries",
                self.alloc.pchunk_in_use(),
                self.activity.allocated()
            ));
        }
        if self.shadow_bytes() > self.layout.promoted.size {
            return Err("shadow duplication exceeds the promoted region".into());
        }
        Ok(())
    }
}

fn restored_kind(mode: CompressionMode, size_code: u8) -> PageType {
    match (mode, size_code) {
        (CompressionMode::Colocated1k, 7) => PageType::Incompressible,
        _ => PageType::Compressed,
    }
}

/// Direct-mapped uncompressed device: one access per request.
pub struct FlatDevice {
    mem: DeviceMemory,
    capacity: u64,
}

impl FlatDevice {
    pub fn new(capacity: u64, channels: ChannelModel) -> Self {
        FlatDevice { mem: DeviceMemory::new(channels, None), capacity }
    }

    pub fn memory(&self) -> &DeviceMemory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut DeviceMemory {
        &mut self.mem
    }

    pub fn preload(&mut self, ospn: u64, page: &[u8]) {
        self.mem.store.write(Mpa(ospn * PAGE_SIZE), page);
    }

    pub fn handle(&mut self, op: Op, ospa: Ospa, payload: Option<&Line>, now: Time) -> Result<Response> {
        if ospa.0 >= self.capacity {
            return Err(crate::error::AddrError::AddressFault { what: "ospa", value: ospa.0, limit: self.capacity }.into());
        }
        let at = Mpa(ospa.line_aligned().0);
        let done = self.mem.access(at, Category::ExternalData, now);
        match op {
            Op::Read => {
                let mut l = [0u8; LINE_SIZE as usize];
                self.mem.store.read(at, &mut l);
                Ok(Response { done, data: Some(l) })
            }
            Op::Write => {
                if let Some(p) = payload {
                    self.mem.store.write(at, p);
                }
                Ok(Response { done, data: None })
            }
        }
    }

    pub fn read_line_functional(&self, ospa: Ospa) -> Line {
        let mut l = [0u8; LINE_SIZE as usize];
        self.mem.store.read(Mpa(ospa.line_aligned().0), &mut l);
        l
    }
}
