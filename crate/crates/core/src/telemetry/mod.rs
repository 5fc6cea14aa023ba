//! Traffic attribution, compression-ratio sampling, latency statistics and
//! the page-fault analyzer.

mod pagefault;
pub mod report;

pub use pagefault::{pagefault_analysis, FaultCounts, PagefaultMode};
pub use report::{CacheReport, DemotionReport, EngineReport, Report};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::timing::Time;

/// Tag carried by every internal 64B channel access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    ExternalData,
    MetadataRead,
    MetadataWrite,
    PromotionRead,
    PromotionWrite,
    DemotionRead,
    DemotionWrite,
    ActivityScan,
    ActivityUpdate,
    AllocatorRead,
    AllocatorWrite,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::ExternalData,
        Category::MetadataRead,
        Category::MetadataWrite,
        Category::PromotionRead,
        Category::PromotionWrite,
        Category::DemotionRead,
        Category::DemotionWrite,
        Category::ActivityScan,
        Category::ActivityUpdate,
        Category::AllocatorRead,
        Category::AllocatorWrite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::ExternalData => "external-data",
            Category::MetadataRead => "metadata-read",
            Category::MetadataWrite => "metadata-write",
            Category::PromotionRead => "promotion-read",
            Category::PromotionWrite => "promotion-write",
            Category::DemotionRead => "demotion-read",
            Category::DemotionWrite => "demotion-write",
            Category::ActivityScan => "activity-scan",
            Category::ActivityUpdate => "activity-update",
            Category::AllocatorRead => "allocator-read",
            Category::AllocatorWrite => "allocator-write",
        }
    }

    /// Coarse group used for control-vs-final breakdowns.
    pub fn group(self) -> &'static str {
        match self {
            Category::ExternalData => "external-data",
            Category::MetadataRead | Category::MetadataWrite => "metadata",
            Category::PromotionRead => "promotion-read",
            Category::PromotionWrite => "promotion-write",
            Category::DemotionRead => "demotion-read",
            Category::DemotionWrite => "demotion-write",
            Category::ActivityScan | Category::ActivityUpdate => "activity",
            Category::AllocatorRead | Category::AllocatorWrite => "allocator",
        }
    }

    pub fn is_write(self) -> bool {
        matches!(
            self,
            Category::MetadataWrite
                | Category::PromotionWrite
                | Category::DemotionWrite
                | Category::AllocatorWrite
        )
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-category 64B access counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficBreakdown {
    counts: [u64; Category::ALL.len()],
    /// Requests answered without touching the data regions.
    pub zero_served: u64,
}

impl TrafficBreakdown {
    pub fn record(&mut self, cat: Category) {
        self.counts[cat.index()] += 1;
    }

    pub fn get(&self, cat: Category) -> u64 {
        self.counts[cat.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn by_category(&self) -> BTreeMap<String, u64> {
        Category::ALL.iter().map(|c| (c.name().to_string(), self.get(*c))).collect()
    }

    pub fn by_group(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for c in Category::ALL {
            *m.entry(c.group().to_string()).or_insert(0) += self.get(c);
        }
        m
    }

    pub fn group_total(&self, group: &str) -> u64 {
        Category::ALL.iter().filter(|c| c.group() == group).map(|c| self.get(*c)).sum()
    }

    /// Everything except the final data access.
    pub fn control_total(&self) -> u64 {
        self.total() - self.get(Category::ExternalData)
    }

    pub fn shares(&self) -> BTreeMap<String, f64> {
        let total = self.total().max(1) as f64;
        self.by_category().into_iter().map(|(k, v)| (k, v as f64 / total)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,group,accesses\n");
        for c in Category::ALL {
            s.push_str(&format!("{},{},{}\n", c.name(), c.group(), self.get(c)));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub request: u64,
    pub time_ps: Time,
    pub allocated_bytes: u64,
    pub physical_bytes: u64,
    pub ratio: f64,
}

/// Samples the effective compression ratio every `interval` requests.
#[derive(Debug, Clone)]
pub struct RatioSampler {
    interval: u64,
    samples: Vec<RatioSample>,
}

impl RatioSampler {
    pub fn new(interval: u64) -> Self {
        RatioSampler { interval: interval.max(1), samples: Vec::new() }
    }

    pub fn due(&self, request: u64) -> bool {
        request > 0 && request % self.interval == 0
    }

    pub fn push(&mut self, request: u64, time_ps: Time, allocated_bytes: u64, physical_bytes: u64) {
        // Nothing allocated yet: no meaningful ratio.
        if allocated_bytes == 0 {
            return;
        }
        let ratio = allocated_bytes as f64 / physical_bytes.max(1) as f64;
        self.samples.push(RatioSample { request, time_ps, allocated_bytes, physical_bytes, ratio });
    }

    pub fn samples(&self) -> &[RatioSample] {
        &self.samples
    }

    pub fn geomean(&self) -> Option<f64> {
        geomean(self.samples.iter().map(|s| s.ratio))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("request,time_ps,allocated_bytes,physical_bytes,ratio\n");
        for r in &self.samples {
            s.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.request, r.time_ps, r.allocated_bytes, r.physical_bytes, r.ratio
            ));
        }
        s
    }
}

pub fn geomean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0u64);
    for v in values {
        sum += v.ln();
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64).exp())
}

/// Request latency distribution in picoseconds.
#[derive(Debug, Clone, Default)]
pub struct LatencyStats {
    values: Vec<Time>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub max_ns: f64,
}

impl LatencyStats {
    pub fn record(&mut self, latency: Time) {
        self.values.push(latency);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Nearest-rank percentile.
    pub fn percentile(&self, p: f64) -> Option<Time> {
        if self.values.is_empty() {
            return None;
        }
        let mut v = self.values.clone();
        v.sort_unstable();
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        Some(v[rank.min(v.len()) - 1])
    }

    pub fn summary(&self) -> LatencySummary {
        if self.values.is_empty() {
            return LatencySummary::default();
        }
        let mut v = self.values.clone();
        v.sort_unstable();
        let pick = |p: f64| {
            let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
            v[rank.min(v.len()) - 1] as f64 / 1000.0
        };
        let sum: u128 = v.iter().map(|&x| u128::from(x)).sum();
        LatencySummary {
            count: v.len() as u64,
            mean_ns: sum as f64 / v.len() as f64 / 1000.0,
            p50_ns: pick(50.0),
            p99_ns: pick(99.0),
            max_ns: *v.last().unwrap() as f64 / 1000.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_breakdown_is_zero() {
        let t = TrafficBreakdown::default();
        assert_eq!(t.total(), 0);
        assert!(t.by_category().values().all(|&v| v == 0));
        assert_eq!(LatencyStats::default().summary(), LatencySummary::default());
        assert_eq!(RatioSampler::new(10).geomean(), None);
    }

    #[test]
    fn groups_cover_the_eight_reporting_buckets() {
        let t = TrafficBreakdown::default();
        let groups: Vec<String> = t.by_group().into_keys().collect();
        assert_eq!(groups.len(), 8);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let mut l = LatencyStats::default();
        for v in 1..=100 {
            l.record(v * 1000);
        }
        assert_eq!(l.percentile(50.0), Some(50_000));
        assert_eq!(l.percentile(99.0), Some(99_000));
        let s = l.summary();
        assert_eq!(s.p99_ns, 99.0);
        assert_eq!(s.mean_ns, 50.5);
    }

    #[test]
    fn geomean_matches_closed_form() {
        let g = geomean([1.0, 4.0]).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn conservation_over_random_records(cats in proptest::collection::vec(0usize..11, 0..500)) {
            let mut t = TrafficBreakdown::default();
            for &c in &cats {
                t.record(Category::ALL[c]);
            }
            prop_assert_eq!(t.total(), cats.len() as u64);
            prop_assert_eq!(t.by_group().values().sum::<u64>(), cats.len() as u64);
        }

        #[test]
        fn geomean_is_duplication_invariant(v in proptest::collection::vec(0.5f64..8.0, 1..50)) {
            let once = geomean(v.iter().copied()).unwrap();
            let twice = geomean(v.iter().chain(v.iter()).copied()).unwrap();
            prop_assert!((once - twice).abs() < 1e-9 * once);
        }
    }
}
