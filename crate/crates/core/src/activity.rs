//! Page activity region and victim selection for demotion.
//!
//! One 4-byte [`ActivityEntry`] per P-chunk, 16 per 64B line. The cursor
//! walks the region like a clock hand: referenced entries get a second
//! chance, unreferenced ones are checked against the metadata cache, and a
//! line that yields nothing falls back to a random allocated entry.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{DeviceLayout, Mpa, LINE_SIZE};
use crate::error::{Result, SimError};
use crate::memory::DeviceMemory;
use crate::metadata::{ActivityEntry, ACTIVITY_ENTRIES_PER_LINE};
use crate::telemetry::Category;
use crate::timing::Time;

const PER_LINE: u64 = ACTIVITY_ENTRIES_PER_LINE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Victim {
    pub ospn: u64,
    pub pchunk_index: u64,
    pub via_random: bool,
    pub lines_scanned: u64,
    /// Referenced bit as fetched, before the scan cleared it.
    pub referenced_at_fetch: bool,
    /// The cache probe answered "absent". Random picks are not probed.
    pub probed_absent: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ActivityStats {
    pub victims: u64,
    pub via_random: u64,
    pub promotions: u64,
    pub lazy_updates: u64,
    pub merged_rmws: u64,
    pub lines_scanned: u64,
    /// Lines fetched per selection -> selections.
    pub scan_histogram: BTreeMap<u64, u64>,
    /// Non-random victims that were referenced when fetched.
    pub unsound_victims: u64,
}

impl ActivityStats {
    pub fn via_random_fraction(&self) -> f64 {
        if self.victims == 0 {
            0.0
        } else {
            self.via_random as f64 / self.victims as f64
        }
    }
}

pub struct ActivityTracker {
    base: Mpa,
    entries: u64,
    cursor: u64,
    allocated: u64,
    rng: ChaCha8Rng,
    last_rmw: Option<(u64, Time)>,
    pub stats: ActivityStats,
    audit: Option<Vec<Victim>>,
}

impl ActivityTracker {
    pub fn new(layout: &DeviceLayout, seed: u64) -> Self {
        ActivityTracker {
            base: Mpa(layout.activity.base),
            entries: layout.pchunk_count(),
            cursor: 0,
            allocated: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_rmw: None,
            stats: ActivityStats::default(),
            audit: None,
        }
    }

    /// Keeps every selected victim for later inspection.
    pub fn enable_audit(&mut self) {
        self.audit.get_or_insert_with(Vec::new);
    }

    pub fn audit_log(&self) -> Option<&[Victim]> {
        self.audit.as_deref()
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    fn lines(&self) -> u64 {
        self.entries.div_ceil(PER_LINE)
    }

    fn word_mpa(&self, idx: u64) -> Mpa {
        Mpa(self.base.0 + idx * 4)
    }

    fn line_mpa(&self, line: u64) -> Mpa {
        Mpa(self.base.0 + line * LINE_SIZE)
    }

    pub fn entry(&self, mem: &DeviceMemory, idx: u64) -> ActivityEntry {
        ActivityEntry::unpack(mem.store.read_u32(self.word_mpa(idx)))
    }

    fn put(&self, mem: &mut DeviceMemory, idx: u64, e: ActivityEntry) {
        mem.store.write_u32(self.word_mpa(idx), e.pack().expect("ospn fits 30 bits"));
    }

    /// Read-modify-write of one activity line; accesses to the same line at
    /// the same timestamp coalesce into the first.
    fn rmw(&mut self, mem: &mut DeviceMemory, idx: u64, now: Time) -> Time {
        let line = idx / PER_LINE;
        if self.last_rmw == Some((line, now)) {
            self.stats.merged_rmws += 1;
            return now;
        }
        self.last_rmw = Some((line, now));
        let at = self.line_mpa(line);
        let r = mem.access(at, Category::ActivityUpdate, now);
        mem.access(at, Category::ActivityUpdate, r)
    }

    /// A freshly allocated P-chunk starts out allocated and referenced.
    pub fn on_promote(&mut self, mem: &mut DeviceMemory, idx: u64, ospn: u64, now: Time) -> Time {
        let old = self.entry(mem, idx);
        assert!(!old.allocated, "activity entry {idx} already allocated to ospn {}", old.ospn);
        self.put(mem, idx, ActivityEntry { allocated: true, ospn: ospn as u32, referenced: true });
        self.allocated += 1;
        self.stats.promotions += 1;
        self.rmw(mem, idx, now)
    }

    /// Lazy reference update when a promoted page's metadata leaves the cache.
    pub fn mark_referenced(&mut self, mem: &mut DeviceMemory, idx: u64, now: Time) -> Time {
        let mut e = self.entry(mem, idx);
        if e.allocated {
            e.referenced = true;
            self.put(mem, idx, e);
        }
        self.stats.lazy_updates += 1;
        self.rmw(mem, idx, now)
    }

    /// Puts a victim back after a demotion that could not complete.
    pub fn restore(&mut self, mem: &mut DeviceMemory, v: &Victim, now: Time) -> Time {
        self.put(mem, v.pchunk_index, ActivityEntry { allocated: true, ospn: v.ospn as u32, referenced: true });
        self.allocated += 1;
        self.rmw(mem, v.pchunk_index, now)
    }

    /// Runs the cursor scan until a victim is found. `cached(ospn)` is the
    /// non-intrusive metadata-cache probe. The victim's entry is released in
    /// the same line write-back.
    pub fn select_victim(
        &mut self,
        mem: &mut DeviceMemory,
        cached: &mut dyn FnMut(u64) -> bool,
        now: Time,
    ) -> Result<(Victim, Time)> {
        if self.allocated == 0 {
            return Err(SimError::Contract("demotion requested with an empty promoted region".into()));
        }
        let mut t = now;
        let mut scanned = 0;
        for _ in 0..=self.lines() {
            let line = self.cursor / PER_LINE;
            let first = self.cursor % PER_LINE;
            let end = ((line + 1) * PER_LINE).min(self.entries);
            t = mem.access(self.line_mpa(line), Category::ActivityScan, t);
            scanned += 1;
            let mut dirty = false;
            let mut pick = None;
            let mut allocated = Vec::new();
            for idx in line * PER_LINE + first..end {
                let mut e = self.entry(mem, idx);
                if !e.allocated {
                    continue;
                }
                allocated.push((idx, e.referenced));
                if e.referenced {
                    e.referenced = false;
                    self.put(mem, idx, e);
                    dirty = true;
                } else if !cached(u64::from(e.ospn)) {
                    pick = Some((idx, false, false));
                    break;
                }
            }
            if pick.is_none() && first == 0 && !allocated.is_empty() {
                let (idx, was_ref) = allocated[self.rng.random_range(0..allocated.len())];
                pick = Some((idx, true, was_ref));
            }
            let Some((idx, via_random, referenced_at_fetch)) = pick else {
                if dirty {
                    mem.access(self.line_mpa(line), Category::ActivityScan, t);
                }
                self.cursor = (line + 1) * PER_LINE;
                if self.cursor >= self.entries {
                    self.cursor = 0;
                }
                continue;
            };
            let e = self.entry(mem, idx);
            self.put(mem, idx, ActivityEntry::default());
            self.allocated -= 1;
            let done = mem.access(self.line_mpa(line), Category::ActivityScan, t);
            self.cursor = if via_random { (line + 1) * PER_LINE } else { idx + 1 };
            if self.cursor >= self.entries {
                self.cursor = 0;
            }
            let v = Victim {
                ospn: u64::from(e.ospn),
                pchunk_index: idx,
                via_random,
                lines_scanned: scanned,
                referenced_at_fetch,
                probed_absent: !via_random,
            };
            self.stats.victims += 1;
            self.stats.via_random += u64::from(via_random);
            self.stats.lines_scanned += scanned;
            *self.stats.scan_histogram.entry(scanned).or_insert(0) += 1;
            if !via_random && v.referenced_at_fetch {
                self.stats.unsound_victims += 1;
            }
            if let Some(a) = &mut self.audit {
                a.push(v);
            }
            return Ok((v, done));
        }
        Err(SimError::Contract("activity scan found no allocated entry".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::LayoutParams;
    use crate::timing::{ChannelCount, ChannelModel, DramTiming};
    use std::collections::HashSet;

    fn setup() -> (ActivityTracker, DeviceMemory) {
        let l = DeviceLayout::new(&LayoutParams { promoted_size: 64 * 4096, ..LayoutParams::default() }).unwrap();
        let m = DeviceMemory::new(ChannelModel::new(ChannelCount::Finite(2), &DramTiming::default()), Some(l.clone()));
        (ActivityTracker::new(&l, 7), m)
    }

    fn clear_ref(a: &ActivityTracker, m: &mut DeviceMemory, idx: u64) {
        let mut e = a.entry(m, idx);
        e.referenced = false;
        a.put(m, idx, e);
    }

    #[test]
    fn promote_writes_slot_and_coalesces() {
        let (mut a, mut m) = setup();
        a.on_promote(&mut m, 0, 42, 0);
        assert_eq!(a.entry(&m, 0), ActivityEntry { allocated: true, ospn: 42, referenced: true });
        assert_eq!(m.traffic().get(Category::ActivityUpdate), 2);
        for i in 1..16 {
            a.on_promote(&mut m, i, 100 + i, 0);
        }
        // same line, same timestamp: one RMW total
        assert_eq!(m.traffic().get(Category::ActivityUpdate), 2);
        assert_eq!(a.stats.merged_rmws, 15);
    }

    #[test]
    fn unreferenced_uncached_slot_zero_is_victim() {
        let (mut a, mut m) = setup();
        for i in 0..16 {
            a.on_promote(&mut m, i, i, i);
        }
        clear_ref(&a, &mut m, 0);
        let before = m.traffic().get(Category::ActivityScan);
        let (v, _) = a.select_victim(&mut m, &mut |_| false, 100).unwrap();
        assert_eq!((v.pchunk_index, v.via_random), (0, false));
        assert_eq!(m.traffic().get(Category::ActivityScan) - before, 2);
        assert!(!a.entry(&m, 0).allocated);
        assert_eq!(a.cursor(), 1);
    }

    #[test]
    fn all_referenced_line_falls_back_to_random() {
        let (mut a, mut m) = setup();
        for i in 0..16 {
            a.on_promote(&mut m, i, i, i);
        }
        let (v, _) = a.select_victim(&mut m, &mut |_| false, 100).unwrap();
        assert!(v.via_random);
        assert!(v.pchunk_index < 16);
        for i in 0..16 {
            let e = a.entry(&m, i);
            assert!(!e.referenced);
            assert_eq!(e.allocated, i != v.pchunk_index);
        }
        assert_eq!(a.cursor(), 16);
    }

    #[test]
    fn cached_page_is_skipped() {
        let (mut a, mut m) = setup();
        for i in 0..3 {
            a.on_promote(&mut m, i, 10 + i, i);
            clear_ref(&a, &mut m, i);
        }
        let (v, _) = a.select_victim(&mut m, &mut |ospn| ospn == 10, 100).unwrap();
        assert_eq!((v.pchunk_index, v.via_random), (1, false));
    }

    #[test]
    fn partial_line_without_victim_moves_on() {
        let (mut a, mut m) = setup();
        // slots 0..16 referenced, slot 16 cold in the next line
        for i in 0..17 {
            a.on_promote(&mut m, i, i, i);
        }
        clear_ref(&a, &mut m, 16);
        let (v, _) = a.select_victim(&mut m, &mut |_| false, 100).unwrap();
        // first line (from slot 0) has no cold entry: random fallback there
        assert!(v.via_random);
        // cursor now starts at line 1, slot 16 is cold
        let (v, _) = a.select_victim(&mut m, &mut |_| false, 200).unwrap();
        assert_eq!((v.pchunk_index, v.via_random), (16, false));
    }

    #[test]
    fn lifecycle_toggles_and_counts_match() {
        let (mut a, mut m) = setup();
        let mut live = HashSet::new();
        for i in 0..40 {
            a.on_promote(&mut m, i, i, i);
            live.insert(i);
        }
        for t in 0..30 {
            let (v, _) = a.select_victim(&mut m, &mut |_| false, 1000 + t).unwrap();
            assert!(live.remove(&v.pchunk_index));
            assert_eq!(a.allocated(), live.len() as u64);
        }
        let freed = (0..40).find(|i| !live.contains(i)).unwrap();
        a.on_promote(&mut m, freed, 99, 5000);
        assert!(a.entry(&m, freed).allocated);
    }

    #[test]
    fn empty_region_is_a_contract_error() {
        let (mut a, mut m) = setup();
        assert!(matches!(a.select_victim(&mut m, &mut |_| false, 0), Err(SimError::Contract(_))));
    }

    #[test]
    fn same_seed_same_victims() {
        let run = || {
            let (mut a, mut m) = setup();
            for i in 0..64 {
                a.on_promote(&mut m, i, i, i);
            }
            (0..20).map(|t| a.select_victim(&mut m, &mut |o| o % 3 == 0, 100 + t).unwrap().0.pchunk_index).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
