//! LRU resident-set model for page-fault rates with and without compression.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::addr::{CHUNK_SIZE, PAGE_SIZE};
use crate::compress::{classify_and_compress, synthesize_page, BackendKind, CompressionMode};
use crate::error::{Result, SimError};
use crate::workload::{Annotation, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PagefaultMode {
    /// Every page costs 4KB.
    Uncompressed,
    /// Every page costs the C-chunks its compressed form occupies.
    Ibex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FaultCounts {
    /// First touches.
    pub cold: u64,
    /// Re-faults after eviction.
    pub capacity: u64,
}

impl FaultCounts {
    pub fn total(&self) -> u64 {
        self.cold + self.capacity
    }
}

/// Resident bytes of a page under IBEX. Ratio annotations are sized with
/// the exact size-oracle filler; unannotated pages are charged in full.
fn ibex_bytes(annot: Option<&Annotation>, seed: u64) -> u64 {
    match annot {
        Some(Annotation::Zero) => 0,
        Some(Annotation::Ratio(r)) => {
            let page = synthesize_page(BackendKind::SizeOracle, f64::from(*r), seed);
            let packed = classify_and_compress(&page, CompressionMode::Colocated1k, BackendKind::SizeOracle.build().as_ref());
            packed.chunk_count as u64 * CHUNK_SIZE
        }
        _ => PAGE_SIZE,
    }
}

/// Replays the page reference string of `trace` through a byte-capacity LRU
/// and counts faults.
pub fn pagefault_analysis(trace: &Trace, capacity_bytes: u64, mode: PagefaultMode) -> Result<FaultCounts> {
    if capacity_bytes < PAGE_SIZE {
        return Err(SimError::Config(format!("resident capacity {capacity_bytes} is smaller than one page")));
    }
    let annots = trace.page_annotations();
    let mut sizes: HashMap<u64, u64> = HashMap::new();
    let mut size_of = |ospn: u64| -> u64 {
        *sizes.entry(ospn).or_insert_with(|| match mode {
            PagefaultMode::Uncompressed => PAGE_SIZE,
            PagefaultMode::Ibex => ibex_bytes(annots.get(&ospn), ospn),
        })
    };

    let mut seen: HashMap<u64, ()> = HashMap::new();
    // ospn -> last-use stamp, and stamp -> ospn for LRU order
    let mut resident: HashMap<u64, u64> = HashMap::new();
    let mut order: BTreeMap<u64, u64> = BTreeMap::new();
    let mut used = 0u64;
    let mut counts = FaultCounts::default();
    for (stamp, r) in trace.records.iter().enumerate() {
        let stamp = stamp as u64;
        let ospn = r.ospa.ospn();
        if let Some(old) = resident.insert(ospn, stamp) {
            order.remove(&old);
            order.insert(stamp, ospn);
            continue;
        }
        if seen.insert(ospn, ()).is_none() {
            counts.cold += 1;
        } else {
            counts.capacity += 1;
        }
        order.insert(stamp, ospn);
        used += size_of(ospn);
        while used > capacity_bytes {
            let (_, victim) = order.pop_first().expect("over capacity implies a resident page");
            resident.remove(&victim);
            used -= size_of(victim);
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TraceRecord;

    fn scan(pages: u64, rounds: u64, annot: Annotation) -> Trace {
        let mut recs = Vec::new();
        for r in 0..rounds {
            for p in 0..pages {
                let rec = TraceRecord::read(p * PAGE_SIZE);
                recs.push(if r == 0 { rec.with(annot) } else { rec });
            }
        }
        Trace::new(recs)
    }

    #[test]
    fn ample_capacity_only_cold_faults() {
        let t = scan(50, 4, Annotation::None);
        let c = pagefault_analysis(&t, 50 * PAGE_SIZE, PagefaultMode::Uncompressed).unwrap();
        assert_eq!(c, FaultCounts { cold: 50, capacity: 0 });
    }

    #[test]
    fn cyclic_scan_over_capacity_always_misses() {
        let (n, r) = (40, 5);
        let t = scan(n, r, Annotation::Ratio(2.0));
        let c = pagefault_analysis(&t, n / 2 * PAGE_SIZE, PagefaultMode::Uncompressed).unwrap();
        assert_eq!(c, FaultCounts { cold: n, capacity: n * (r - 1) });
        let c = pagefault_analysis(&t, n / 2 * PAGE_SIZE, PagefaultMode::Ibex).unwrap();
        assert_eq!(c, FaultCounts { cold: n, capacity: 0 });
    }

    #[test]
    fn incompressible_pages_match_baseline() {
        let t = scan(30, 3, Annotation::Ratio(1.0));
        let cap = 15 * PAGE_SIZE;
        assert_eq!(
            pagefault_analysis(&t, cap, PagefaultMode::Ibex).unwrap(),
            pagefault_analysis(&t, cap, PagefaultMode::Uncompressed).unwrap()
        );
    }

    #[test]
    fn tiny_capacity_rejected() {
        assert!(pagefault_analysis(&Trace::default(), 100, PagefaultMode::Ibex).is_err());
    }

    #[test]
    fn zero_pages_cost_nothing_under_ibex() {
        let t = scan(100, 2, Annotation::Zero);
        let c = pagefault_analysis(&t, PAGE_SIZE, PagefaultMode::Ibex).unwrap();
        assert_eq!(c.capacity, 0);
    }
}
