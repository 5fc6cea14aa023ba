//! Device DRAM: a sparse byte store for functional state plus the channel
//! model and traffic counters that every timed access goes through.

use std::collections::HashMap;

use crate::addr::{DeviceLayout, Mpa, Region, LINE_SIZE, PAGE_SHIFT, PAGE_SIZE};
use crate::telemetry::{Category, TrafficBreakdown};
use crate::timing::{ChannelModel, Time};

/// Only touched 4KB frames are backed; everything else reads as zero.
#[derive(Debug, Default, Clone)]
pub struct SparseStore {
    frames: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl SparseStore {
    pub fn read(&self, mpa: Mpa, out: &mut [u8]) {
        let mut addr = mpa.0;
        let mut done = 0;
        while done < out.len() {
            let off = (addr % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(out.len() - done);
            match self.frames.get(&(addr >> PAGE_SHIFT)) {
                Some(f) => out[done..done + n].copy_from_slice(&f[off..off + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
            addr += n as u64;
        }
    }

    pub fn read_vec(&self, mpa: Mpa, len: usize) -> Vec<u8> {
        let mut v = vec![0; len];
        self.read(mpa, &mut v);
        v
    }

    pub fn write(&mut self, mpa: Mpa, data: &[u8]) {
        let mut addr = mpa.0;
        let mut done = 0;
        while done < data.len() {
            let off = (addr % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let frame = self
                .frames
                .entry(addr >> PAGE_SHIFT)
                .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
            frame[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
            addr += n as u64;
        }
    }

    pub fn read_u64(&self, mpa: Mpa) -> u64 {
        let mut b = [0u8; 8];
        self.read(mpa, &mut b);
        u64::from_le_bytes(b)
    }

    pub fn write_u64(&mut self, mpa: Mpa, v: u64) {
        self.write(mpa, &v.to_le_bytes());
    }

    pub fn read_u32(&self, mpa: Mpa) -> u32 {
        let mut b = [0u8; 4];
        self.read(mpa, &mut b);
        u32::from_le_bytes(b)
    }

    pub fn write_u32(&mut self, mpa: Mpa, v: u32) {
        self.write(mpa, &v.to_le_bytes());
    }

    pub fn backed_frames(&self) -> usize {
        self.frames.len()
    }
}

/// One logged channel access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub issue: Time,
    pub done: Time,
    pub mpa: Mpa,
    pub category: Category,
    pub region: Region,
}

pub struct DeviceMemory {
    pub store: SparseStore,
    channels: ChannelModel,
    layout: Option<DeviceLayout>,
    traffic: TrafficBreakdown,
    by_region: [u64; Region::ALL.len()],
    log: Option<Vec<AccessEvent>>,
    quiet: bool,
}

impl DeviceMemory {
    /// `layout` is `None` for the uncompressed baseline, whose accesses are
    /// all attributed to [`Region::Direct`].
    pub fn new(channels: ChannelModel, layout: Option<DeviceLayout>) -> Self {
        DeviceMemory {
            store: SparseStore::default(),
            channels,
            layout,
            traffic: TrafficBreakdown::default(),
            by_region: [0; Region::ALL.len()],
            log: None,
            quiet: false,
        }
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    /// While quiet, accesses are neither timed nor counted (used to preload
    /// initial contents).
    pub fn set_quiet(&mut self, quiet: bool) {
        self.quiet = quiet;
    }

    pub fn region_of(&self, mpa: Mpa) -> Region {
        match &self.layout {
            None => Region::Direct,
            Some(l) => l
                .region_of(mpa)
                .unwrap_or_else(|| panic!("access {:#x} falls outside every region", mpa.0)),
        }
    }

    /// One 64B access issued at `now`; returns its completion time.
    pub fn access(&mut self, mpa: Mpa, cat: Category, now: Time) -> Time {
        if self.quiet {
            return now;
        }
        let mpa = Mpa(mpa.0 & !(LINE_SIZE - 1));
        let region = self.region_of(mpa);
        let done = self.channels.submit(mpa, now);
        self.traffic.record(cat);
        self.by_region[region as usize] += 1;
        if let Some(log) = &mut self.log {
            log.push(AccessEvent { issue: now, done, mpa, category: cat, region });
        }
        done
    }

    /// `count` consecutive lines starting at `base`; returns the last completion.
    pub fn access_lines(&mut self, base: Mpa, count: u64, cat: Category, now: Time) -> Time {
        (0..count)
            .map(|i| self.access(base.offset(i * LINE_SIZE), cat, now))
            .max()
            .unwrap_or(now)
    }

    pub fn traffic(&self) -> &TrafficBreakdown {
        &self.traffic
    }

    pub fn traffic_mut(&mut self) -> &mut TrafficBreakdown {
        &mut self.traffic
    }

    /// Raw access count as seen by the channel model.
    pub fn channel_accesses(&self) -> u64 {
        self.channels.accesses()
    }

    pub fn region_accesses(&self, r: Region) -> u64 {
        self.by_region[r as usize]
    }

    pub fn channels(&self) -> &ChannelModel {
        &self.channels
    }

    pub fn log(&self) -> Option<&[AccessEvent]> {
        self.log.as_deref()
    }

    pub fn log_csv(&self) -> Option<String> {
        let log = self.log.as_ref()?;
        let mut s = String::from("issue_ps,done_ps,mpa,category,region\n");
        for e in log {
            s.push_str(&format!(
                "{},{},{:#x},{},{}\n",
                e.issue,
                e.done,
                e.mpa.0,
                e.category.name(),
                e.region.name()
            ));
        }
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::LayoutParams;
    use crate::timing::{ChannelCount, DramTiming};
    use proptest::prelude::*;

    #[test]
    fn untouched_memory_reads_zero() {
        let s = SparseStore::default();
        assert_eq!(s.read_vec(Mpa(1 << 40), 16), vec![0; 16]);
        assert_eq!(s.backed_frames(), 0);
    }

    #[test]
    fn accesses_are_attributed_to_regions() {
        let l = DeviceLayout::new(&LayoutParams::default()).unwrap();
        let ch = ChannelModel::new(ChannelCount::Finite(2), &DramTiming::default());
        let mut m = DeviceMemory::new(ch, Some(l.clone()));
        m.access(Mpa(l.compressed.base), Category::ExternalData, 0);
        m.access(Mpa(l.metadata.base), Category::MetadataRead, 0);
        m.set_quiet(true);
        m.access(Mpa(l.promoted.base), Category::PromotionWrite, 0);
        m.set_quiet(false);
        assert_eq!(m.region_accesses(Region::Compressed), 1);
        assert_eq!(m.region_accesses(Region::Metadata), 1);
        assert_eq!(m.region_accesses(Region::Promoted), 0);
        assert_eq!(m.traffic().total(), m.channel_accesses());
    }

    proptest! {
        #[test]
        fn store_matches_flat_buffer(ops in proptest::collection::vec((0u64..20_000, proptest::collection::vec(any::<u8>(), 1..300)), 1..40)) {
            let mut flat = vec![0u8; 20_400];
            let mut s = SparseStore::default();
            for (addr, data) in &ops {
                s.write(Mpa(*addr), data);
                flat[*addr as usize..*addr as usize + data.len()].copy_from_slice(data);
            }
            prop_assert_eq!(s.read_vec(Mpa(0), flat.len()), flat);
        }
    }
}
