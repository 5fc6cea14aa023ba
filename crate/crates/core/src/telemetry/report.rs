//! End-of-run summary. Only ordered maps and run-derived numbers go in, so
//! identical runs serialize to identical bytes.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{LatencySummary, TrafficBreakdown};
use crate::activity::ActivityStats;
use crate::alloc::AllocSnapshot;
use crate::meta_cache::CacheStats;

pub type EngineReport = crate::engine::EngineStats;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficReport {
    pub total: u64,
    pub channel_accesses: u64,
    /// Per-category sum equals the channel model's access count.
    pub conserved: bool,
    pub final_access: u64,
    pub control: u64,
    pub zero_served: u64,
    pub by_category: BTreeMap<String, u64>,
    pub by_group: BTreeMap<String, u64>,
    pub shares: BTreeMap<String, f64>,
    pub by_region: BTreeMap<String, u64>,
}

impl TrafficReport {
    pub fn new(t: &TrafficBreakdown, channel_accesses: u64, by_region: BTreeMap<String, u64>) -> Self {
        let region_sum: u64 = by_region.values().sum();
        TrafficReport {
            total: t.total(),
            channel_accesses,
            conserved: t.total() == channel_accesses && region_sum == channel_accesses,
            final_access: t.get(super::Category::ExternalData),
            control: t.control_total(),
            zero_served: t.zero_served,
            by_category: t.by_category(),
            by_group: t.by_group(),
            shares: t.shares(),
            by_region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheReport {
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub evictions: u64,
    pub dirty_evictions: u64,
    pub probes: u64,
    pub probe_hits: u64,
    pub lazy_updates: u64,
    pub insertions: u64,
    pub max_eviction_age: u64,
    pub mean_eviction_age: f64,
}

impl CacheReport {
    pub fn new(s: &CacheStats, lazy_updates: u64) -> Self {
        CacheReport {
            hits: s.hits,
            misses: s.misses,
            hit_rate: s.hit_rate(),
            evictions: s.evictions,
            dirty_evictions: s.dirty_evictions,
            probes: s.probes,
            probe_hits: s.probe_hits,
            lazy_updates,
            insertions: s.insertions,
            max_eviction_age: s.max_eviction_age,
            mean_eviction_age: if s.evictions == 0 { 0.0 } else { s.total_eviction_age as f64 / s.evictions as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemotionReport {
    pub victims: u64,
    pub via_random: u64,
    pub via_random_fraction: f64,
    pub unsound_victims: u64,
    pub lines_scanned: u64,
    pub merged_activity_rmws: u64,
    pub scan_histogram: BTreeMap<u64, u64>,
    pub clean: u64,
    pub dirty: u64,
    pub failed: u64,
    pub compressions: u64,
}

impl DemotionReport {
    pub fn new(a: &ActivityStats, e: &EngineReport) -> Self {
        DemotionReport {
            victims: a.victims,
            via_random: a.via_random,
            via_random_fraction: a.via_random_fraction(),
            unsound_victims: a.unsound_victims,
            lines_scanned: a.lines_scanned,
            merged_activity_rmws: a.merged_rmws,
            scan_histogram: a.scan_histogram.clone(),
            clean: e.clean_demotions,
            dirty: e.dirty_demotions,
            failed: e.failed_demotions,
            compressions: e.demotion_compressions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioReport {
    pub geomean: Option<f64>,
    pub samples: usize,
    pub allocated_bytes: u64,
    pub physical_bytes: u64,
    pub shadow_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub label: String,
    pub baseline: String,
    pub mode: Option<String>,
    pub format: Option<String>,
    pub shadowed_promotion: Option<bool>,
    pub backend: Option<String>,
    pub seed: u64,
    pub requests: u64,
    pub reads: u64,
    pub writes: u64,
    pub sim_time_ps: u64,
    pub traffic: TrafficReport,
    pub latency: LatencySummary,
    pub ratio: RatioReport,
    pub metadata_cache: Option<CacheReport>,
    pub demotion: Option<DemotionReport>,
    pub engine: Option<EngineReport>,
    pub allocator: Option<AllocSnapshot>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
