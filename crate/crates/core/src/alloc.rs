//! Free lists of 512B C-chunks (one per sub-region) and 4KB P-chunks.
//!
//! Each list keeps its head in a register. Next pointers live in the first
//! eight bytes of every free chunk, so popping the head costs one 64B read
//! and pushing costs one 64B write. Chunks that were never allocated form an
//! implicit index-ordered tail starting at `frontier`, equivalent to a list
//! initialised as `0 -> 1 -> 2 -> ...`.

use std::collections::HashSet;

use crate::addr::{DeviceLayout, Mpa, PAGE_SIZE};
use crate::error::{Result, SimError};
use crate::memory::DeviceMemory;
use crate::metadata::ChunkList;
use crate::telemetry::Category;
use crate::timing::Time;

const NIL: u64 = u64::MAX;

/// Default P-chunk low-water mark below which demotion runs.
pub const DEMOTION_THRESHOLD: u64 = 256;

#[derive(Debug, Clone)]
struct FreeList {
    /// Address of chunk 0 and the chunk stride.
    base: u64,
    stride: u64,
    total: u64,
    head: u64,
    frontier: u64,
    free: u64,
    /// Members of the explicit (pushed) part of the list.
    pushed: HashSet<u64>,
}

impl FreeList {
    fn new(base: u64, stride: u64, total: u64) -> Self {
        FreeList { base, stride, total, head: NIL, frontier: 0, free: total, pushed: HashSet::new() }
    }

    fn mpa(&self, idx: u64) -> Mpa {
        Mpa(self.base + idx * self.stride)
    }

    fn pop(&mut self, mem: &mut DeviceMemory, cat: Category, now: Time) -> Option<(u64, Time)> {
        if self.head != NIL {
            let idx = self.head;
            let at = self.mpa(idx);
            let done = mem.access(at, cat, now);
            self.head = mem.store.read_u64(at);
            self.pushed.remove(&idx);
            self.free -= 1;
            Some((idx, done))
        } else if self.frontier < self.total {
            let idx = self.frontier;
            let done = mem.access(self.mpa(idx), cat, now);
            self.frontier += 1;
            self.free -= 1;
            Some((idx, done))
        } else {
            None
        }
    }

    fn push(&mut self, idx: u64, mem: &mut DeviceMemory, cat: Category, now: Time) -> Time {
        assert!(
            idx < self.frontier && !self.pushed.contains(&idx),
            "double free of chunk {idx} at {:#x}",
            self.mpa(idx).0
        );
        let at = self.mpa(idx);
        mem.store.write_u64(at, self.head);
        self.head = idx;
        self.pushed.insert(idx);
        self.free += 1;
        mem.access(at, cat, now)
    }

    fn is_free(&self, idx: u64) -> bool {
        idx >= self.frontier || self.pushed.contains(&idx)
    }
}

/// Free counts for the end-of-run report.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct AllocSnapshot {
    pub cchunk_free: Vec<u64>,
    pub cchunk_total: Vec<u64>,
    pub pchunk_free: u64,
    pub pchunk_total: u64,
}

#[derive(Debug, Clone)]
pub struct ChunkAllocator {
    clists: Vec<FreeList>,
    plist: FreeList,
    threshold: u64,
    pub exhaustion_events: u64,
}

impl ChunkAllocator {
    pub fn new(layout: &DeviceLayout, threshold: u64) -> Self {
        let per = layout.chunks_per_sub_region();
        let clists = (0..layout.sub_region_count() as u8)
            .map(|s| {
                let base = layout.sub_region_base(s).expect("sub-region in range");
                FreeList::new(base.0, 512, per)
            })
            .collect();
        ChunkAllocator {
            clists,
            plist: FreeList::new(layout.promoted.base, PAGE_SIZE, layout.pchunk_count()),
            threshold,
            exhaustion_events: 0,
        }
    }

    /// Pops `n` chunks from the lowest sub-region that has `n` free.
    pub fn alloc_cchunks(&mut self, n: usize, mem: &mut DeviceMemory, now: Time) -> Result<(u8, ChunkList, Time)> {
        assert!((1..=8).contains(&n), "a page needs 1..=8 chunks, asked for {n}");
        let Some(sub) = self.clists.iter().position(|l| l.free >= n as u64) else {
            self.exhaustion_events += 1;
            return Err(SimError::CapacityExhausted { needed: n });
        };
        let list = &mut self.clists[sub];
        let mut chunks = ChunkList::new();
        let mut done = now;
        for _ in 0..n {
            let (idx, t) = list.pop(mem, Category::AllocatorRead, now).expect("free count checked");
            chunks.push(list.mpa(idx));
            done = done.max(t);
        }
        Ok((sub as u8, chunks, done))
    }

    pub fn free_cchunks(&mut self, chunks: &[Mpa], mem: &mut DeviceMemory, now: Time) -> Time {
        let mut done = now;
        for &c in chunks {
            let (sub, idx) = self.locate(c);
            done = done.max(self.clists[sub].push(idx, mem, Category::AllocatorWrite, now));
        }
        done
    }

    fn locate(&self, c: Mpa) -> (usize, u64) {
        let sub = self
            .clists
            .iter()
            .position(|l| c.0 >= l.base && c.0 < l.base + l.total * l.stride)
            .unwrap_or_else(|| panic!("{:#x} is not a C-chunk", c.0));
        let l = &self.clists[sub];
        assert_eq!((c.0 - l.base) % l.stride, 0, "misaligned C-chunk {:#x}", c.0);
        (sub, (c.0 - l.base) / l.stride)
    }

    /// `None` when the promoted region is full (back-pressure).
    pub fn alloc_pchunk(&mut self, mem: &mut DeviceMemory, now: Time) -> Option<(Mpa, Time)> {
        let (idx, t) = self.plist.pop(mem, Category::AllocatorRead, now)?;
        Some((self.plist.mpa(idx), t))
    }

    pub fn free_pchunk(&mut self, p: Mpa, mem: &mut DeviceMemory, now: Time) -> Time {
        let l = &self.plist;
        assert!(
            p.0 >= l.base && (p.0 - l.base) % PAGE_SIZE == 0 && (p.0 - l.base) / PAGE_SIZE < l.total,
            "{:#x} is not a P-chunk",
            p.0
        );
        let idx = (p.0 - l.base) / PAGE_SIZE;
        self.plist.push(idx, mem, Category::AllocatorWrite, now)
    }

    pub fn pchunk_free(&self) -> u64 {
        self.plist.free
    }

    pub fn pchunk_total(&self) -> u64 {
        self.plist.total
    }

    pub fn pchunk_in_use(&self) -> u64 {
        self.plist.total - self.plist.free
    }

    pub fn cchunk_in_use(&self) -> u64 {
        self.clists.iter().map(|l| l.total - l.free).sum()
    }

    pub fn cchunk_free(&self, sub: u8) -> u64 {
        self.clists[sub as usize].free
    }

    /// The demotion-needed signal.
    pub fn needs_demotion(&self) -> bool {
        self.plist.free < self.threshold
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn is_cchunk_free(&self, c: Mpa) -> bool {
        let (sub, idx) = self.locate(c);
        self.clists[sub].is_free(idx)
    }

    pub fn snapshot(&self) -> AllocSnapshot {
        AllocSnapshot {
            cchunk_free: self.clists.iter().map(|l| l.free).collect(),
            cchunk_total: self.clists.iter().map(|l| l.total).collect(),
            pchunk_free: self.plist.free,
            pchunk_total: self.plist.total,
        }
    }

    /// Walks every explicit list through memory and checks it against the
    /// bookkeeping: no cycles, no duplicates, counts add up.
    pub fn audit(&self, mem: &DeviceMemory) -> std::result::Result<(), String> {
        for (i, l) in self.clists.iter().chain(std::iter::once(&self.plist)).enumerate() {
            let mut seen = HashSet::new();
            let mut cur = l.head;
            while cur != NIL {
                if cur >= l.frontier || !seen.insert(cur) {
                    return Err(format!("list {i}: corrupt link to {cur}"));
                }
                cur = mem.store.read_u64(l.mpa(cur));
            }
            if seen.len() != l.pushed.len() {
                return Err(format!("list {i}: {} linked vs {} pushed", seen.len(), l.pushed.len()));
            }
            if l.free != l.pushed.len() as u64 + (l.total - l.frontier) {
                return Err(format!("list {i}: free count {} does not add up", l.free));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::LayoutParams;
    use crate::timing::{ChannelCount, ChannelModel, DramTiming};
    use proptest::prelude::*;

    fn setup(p: LayoutParams) -> (DeviceLayout, ChunkAllocator, DeviceMemory) {
        let l = DeviceLayout::new(&p).unwrap();
        let a = ChunkAllocator::new(&l, DEMOTION_THRESHOLD);
        let m = DeviceMemory::new(ChannelModel::new(ChannelCount::Finite(2), &DramTiming::default()), Some(l.clone()));
        (l, a, m)
    }

    fn toy() -> LayoutParams {
        LayoutParams {
            compressed_size: 2 * 4096,
            sub_region_size: 4096,
            promoted_size: 8 * 4096,
            advertised_capacity: Some(1 << 20),
            ..LayoutParams::default()
        }
    }

    #[test]
    fn fresh_list_is_index_ordered() {
        let (l, mut a, mut m) = setup(LayoutParams::default());
        let (sub, chunks, _) = a.alloc_cchunks(4, &mut m, 0).unwrap();
        assert_eq!(sub, 0);
        let idx: Vec<u32> = chunks.as_slice().iter().map(|&c| l.chunk_index(c, 0).unwrap()).collect();
        assert_eq!(idx, [0, 1, 2, 3]);
        assert_eq!(m.traffic().get(Category::AllocatorRead), 4);
        let (_, next, _) = a.alloc_cchunks(1, &mut m, 0).unwrap();
        assert_eq!(l.chunk_index(next.as_slice()[0], 0).unwrap(), 4);
    }

    #[test]
    fn exhaustion_fails_over_to_next_sub_region() {
        let (l, mut a, mut m) = setup(toy());
        // 8 chunks per toy sub-region
        for _ in 0..8 {
            assert_eq!(a.alloc_cchunks(1, &mut m, 0).unwrap().0, 0);
        }
        let (sub, c, _) = a.alloc_cchunks(1, &mut m, 0).unwrap();
        assert_eq!(sub, 1);
        assert_eq!(l.sub_region_of(c.as_slice()[0]), Some(1));
        let (sub, c, _) = a.alloc_cchunks(7, &mut m, 0).unwrap();
        assert_eq!((sub, c.len()), (1, 7));
        assert!(matches!(a.alloc_cchunks(1, &mut m, 0), Err(SimError::CapacityExhausted { needed: 1 })));
        assert_eq!(a.exhaustion_events, 1);
    }

    #[test]
    fn eight_chunks_come_from_one_sub_region() {
        let (l, mut a, mut m) = setup(toy());
        a.alloc_cchunks(3, &mut m, 0).unwrap();
        let (sub, c, _) = a.alloc_cchunks(8, &mut m, 0).unwrap();
        assert_eq!(sub, 1);
        assert!(c.as_slice().iter().all(|&x| l.sub_region_of(x) == Some(1)));
    }

    #[test]
    fn pchunk_stack_discipline_and_threshold() {
        let (l, mut a, mut m) = setup(LayoutParams::default());
        assert_eq!(a.pchunk_free(), 131_072);
        let (p, _) = a.alloc_pchunk(&mut m, 0).unwrap();
        assert_eq!(p, Mpa(l.promoted.base));
        a.free_pchunk(p, &mut m, 0);
        assert_eq!(a.alloc_pchunk(&mut m, 0).unwrap().0, p);

        let mut a = ChunkAllocator::new(&l, 256);
        let mut m2 = DeviceMemory::new(ChannelModel::new(ChannelCount::Finite(2), &DramTiming::default()), Some(l.clone()));
        while a.pchunk_free() > 257 {
            a.alloc_pchunk(&mut m2, 0).unwrap();
        }
        assert!(!a.needs_demotion());
        a.alloc_pchunk(&mut m2, 0).unwrap();
        assert_eq!(a.pchunk_free(), 256);
        assert!(!a.needs_demotion());
        a.alloc_pchunk(&mut m2, 0).unwrap();
        assert!(a.needs_demotion());
    }

    #[test]
    fn free_then_alloc_returns_same_chunk() {
        let (_, mut a, mut m) = setup(LayoutParams::default());
        let (_, c, _) = a.alloc_cchunks(2, &mut m, 0).unwrap();
        a.free_cchunks(&c.as_slice()[1..], &mut m, 0);
        assert_eq!(m.traffic().get(Category::AllocatorWrite), 1);
        let (_, again, _) = a.alloc_cchunks(1, &mut m, 0).unwrap();
        assert_eq!(again.as_slice(), &c.as_slice()[1..]);
    }

    #[test]
    fn empty_promoted_region_backpressures() {
        let (_, mut a, mut m) = setup(toy());
        for _ in 0..8 {
            a.alloc_pchunk(&mut m, 0).unwrap();
        }
        assert!(a.alloc_pchunk(&mut m, 0).is_none());
    }

    #[test]
    #[should_panic(expected = "double free")]
    fn double_free_panics() {
        let (_, mut a, mut m) = setup(LayoutParams::default());
        let (_, c, _) = a.alloc_cchunks(1, &mut m, 0).unwrap();
        a.free_cchunks(c.as_slice(), &mut m, 0);
        a.free_cchunks(c.as_slice(), &mut m, 0);
    }

    proptest! {
        #[test]
        fn conservation_under_random_ops(ops in proptest::collection::vec((any::<bool>(), 1usize..=8, any::<prop::sample::Index>()), 1..200)) {
            let (_, mut a, mut m) = setup(LayoutParams {
                compressed_size: 4 * 16384,
                sub_region_size: 16384,
                promoted_size: 16 * 4096,
                advertised_capacity: Some(1 << 20),
                ..LayoutParams::default()
            });
            let mut live: Vec<Mpa> = Vec::new();
            let mut pl: Vec<Mpa> = Vec::new();
            let totals: u64 = a.snapshot().cchunk_total.iter().sum();
            for (alloc, n, pick) in ops {
                if alloc {
                    if let Ok((_, c, _)) = a.alloc_cchunks(n, &mut m, 0) {
                        for &x in c.as_slice() {
                            prop_assert!(!live.contains(&x));
                            live.push(x);
                        }
                    }
                    if let Some((p, _)) = a.alloc_pchunk(&mut m, 0) {
                        prop_assert!(!pl.contains(&p));
                        pl.push(p);
                    }
                } else if !live.is_empty() {
                    let x = live.swap_remove(pick.index(live.len()));
                    a.free_cchunks(&[x], &mut m, 0);
                    if !pl.is_empty() {
                        let p = pl.swap_remove(pick.index(pl.len()));
                        a.free_pchunk(p, &mut m, 0);
                    }
                }
                prop_assert_eq!(a.cchunk_in_use() as usize, live.len());
                prop_assert_eq!(a.cchunk_in_use() + a.snapshot().cchunk_free.iter().sum::<u64>(), totals);
                prop_assert_eq!(a.pchunk_in_use() as usize, pl.len());
                for &x in &live {
                    prop_assert!(!a.is_cchunk_free(x));
                }
                prop_assert!(a.audit(&m).is_ok());
            }
        }
    }
}
