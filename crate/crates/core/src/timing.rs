//! Time base, DRAM channel service model, CXL link model and the ordered
//! event queue that drives a simulation.
//!
//! All times are integer picoseconds.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::addr::{Mpa, LINE_SHIFT, LINE_SIZE};

pub type Time = u64;

pub const PS_PER_NS: Time = 1000;

/// Device clock period for a clock given in Hz.
pub fn cycle_ps(clock_hz: f64) -> Time {
    (1e12 / clock_hz).round() as Time
}

/// DDR timing parameters in memory-clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramTiming {
    pub data_rate_mts: f64,
    pub t_cl: u32,
    pub t_rcd: u32,
    /// Accepted for completeness; the closed-form model has no row state.
    pub t_rp: u32,
    pub bus_bytes: u32,
}

impl Default for DramTiming {
    fn default() -> Self {
        DramTiming { data_rate_mts: 5600.0, t_cl: 40, t_rcd: 40, t_rp: 40, bus_bytes: 8 }
    }
}

impl DramTiming {
    /// Memory clock period: DDR transfers twice per clock.
    pub fn tck_ps(&self) -> f64 {
        2e6 / self.data_rate_mts
    }

    /// Closed-form access latency, tRCD + tCL.
    pub fn access_latency_ps(&self) -> Time {
        (f64::from(self.t_rcd + self.t_cl) * self.tck_ps()).round() as Time
    }

    /// Peak channel bandwidth in bytes per second.
    pub fn bandwidth(&self) -> f64 {
        self.data_rate_mts * 1e6 * f64::from(self.bus_bytes)
    }

    /// Data-bus occupancy of one 64B access.
    pub fn burst_ps(&self) -> Time {
        (LINE_SIZE as f64 / self.bandwidth() * 1e12).ceil() as Time
    }
}

/// Number of independent DRAM channels, or an idealised contention-free
/// memory with the same latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelCount {
    Finite(u32),
    Unlimited(Unlimited),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unlimited {
    Unlimited,
}

impl ChannelCount {
    pub const UNLIMITED: ChannelCount = ChannelCount::Unlimited(Unlimited::Unlimited);

    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("unlimited") {
            return Some(Self::UNLIMITED);
        }
        s.parse().ok().filter(|&n: &u32| n > 0).map(ChannelCount::Finite)
    }
}

impl std::fmt::Display for ChannelCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelCount::Finite(n) => write!(f, "{n}"),
            ChannelCount::Unlimited(_) => f.write_str("unlimited"),
        }
    }
}

/// FIFO per-channel service with 64B round-robin interleaving.
///
/// Each access reserves its channel for one burst starting at
/// `max(now, channel_free)`; data is back after the fixed access latency.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    latency: Time,
    burst: Time,
    free_at: Vec<Time>,
    busy: Vec<Time>,
    accesses: u64,
    unlimited: bool,
}

impl ChannelModel {
    pub fn new(count: ChannelCount, dram: &DramTiming) -> Self {
        let (n, unlimited) = match count {
            ChannelCount::Finite(n) => (n.max(1) as usize, false),
            ChannelCount::Unlimited(_) => (1, true),
        };
        ChannelModel {
            latency: dram.access_latency_ps(),
            burst: dram.burst_ps(),
            free_at: vec![0; n],
            busy: vec![0; n],
            accesses: 0,
            unlimited,
        }
    }

    pub fn latency(&self) -> Time {
        self.latency
    }

    pub fn burst(&self) -> Time {
        self.burst
    }

    pub fn channels(&self) -> Option<usize> {
        (!self.unlimited).then_some(self.free_at.len())
    }

    pub fn channel_of(&self, mpa: Mpa) -> usize {
        ((mpa.0 >> LINE_SHIFT) % self.free_at.len() as u64) as usize
    }

    /// Enqueues one 64B access issued at `now`; returns its completion time.
    pub fn submit(&mut self, mpa: Mpa, now: Time) -> Time {
        debug_assert!(mpa.is_aligned(LINE_SIZE), "unaligned channel access {:#x}", mpa.0);
        self.accesses += 1;
        if self.unlimited {
            return now + self.latency + self.burst;
        }
        let ch = self.channel_of(mpa);
        let start = now.max(self.free_at[ch]);
        self.free_at[ch] = start + self.burst;
        self.busy[ch] += self.burst;
        start + self.latency + self.burst
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    /// Total data-bus busy time per channel.
    pub fn busy_time(&self) -> &[Time] {
        &self.busy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub round_trip_ns: f64,
    pub bandwidth_gbps: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { round_trip_ns: 70.0, bandwidth_gbps: 32.0 }
    }
}

/// Host-device link: a fixed round trip split evenly between directions,
/// plus one serialized 64B flit per request on the way in.
#[derive(Debug, Clone)]
pub struct LinkModel {
    half_rtt: Time,
    flit: Time,
    free_at: Time,
}

impl LinkModel {
    pub fn new(p: &LinkParams) -> Self {
        let rtt = (p.round_trip_ns * PS_PER_NS as f64).round() as Time;
        LinkModel {
            half_rtt: rtt / 2,
            flit: (LINE_SIZE as f64 * 1000.0 / p.bandwidth_gbps).ceil() as Time,
            free_at: 0,
        }
    }

    pub fn flit(&self) -> Time {
        self.flit
    }

    /// Time at which a request sent at `now` reaches the device.
    pub fn to_device(&mut self, now: Time) -> Time {
        let start = now.max(self.free_at);
        self.free_at = start + self.flit;
        start + self.flit + self.half_rtt
    }

    /// Time at which a response leaving the device at `now` reaches the host.
    pub fn to_host(&self, now: Time) -> Time {
        now + self.half_rtt
    }
}

/// Scheduling class at equal timestamps: foreground before background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Priority {
    Foreground = 0,
    Background = 1,
}

struct Entry<E> {
    key: (Time, Priority, u64),
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Min-heap of events ordered by (time, priority, insertion order).
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn push(&mut self, at: Time, prio: Priority, event: E) {
        self.heap.push(Reverse(Entry { key: (at, prio, self.seq), event }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(Time, E)> {
        let Reverse(e) = self.heap.pop()?;
        Some((e.key.0, e.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ddr5_5600_closed_form() {
        let d = DramTiming::default();
        assert!((d.tck_ps() - 357.142857).abs() < 1e-5);
        // 80 cycles at 2800 MHz
        assert_eq!(d.access_latency_ps(), 28_571);
        assert!((d.bandwidth() - 44.8e9).abs() < 1.0);
        assert_eq!(d.burst_ps(), 1_429);
        assert_eq!(cycle_ps(2e9), 500);
    }

    #[test]
    fn idle_channel_latency_is_access_plus_burst() {
        let d = DramTiming::default();
        let mut ch = ChannelModel::new(ChannelCount::Finite(2), &d);
        assert_eq!(ch.submit(Mpa(0), 1000), 1000 + 28_571 + 1_429);
    }

    #[test]
    fn different_channels_are_independent() {
        let d = DramTiming::default();
        let mut ch = ChannelModel::new(ChannelCount::Finite(2), &d);
        assert_eq!(ch.submit(Mpa(0), 0), ch.submit(Mpa(64), 0));
    }

    #[test]
    fn compressed_fetch_spreads_over_two_channels() {
        let d = DramTiming::default();
        let mut ch = ChannelModel::new(ChannelCount::Finite(2), &d);
        let done: Vec<Time> = (0..32).map(|i| ch.submit(Mpa(i * 64), 0)).collect();
        // 16 serialized on each channel
        let last = *done.iter().max().unwrap();
        assert_eq!(last, 15 * 1_429 + 28_571 + 1_429);
        assert_eq!(done.iter().filter(|&&t| t == last).count(), 2);
    }

    #[test]
    fn unlimited_channels_never_queue() {
        let d = DramTiming::default();
        let mut ch = ChannelModel::new(ChannelCount::UNLIMITED, &d);
        for i in 0..100 {
            assert_eq!(ch.submit(Mpa(i * 64), 5), 5 + 28_571 + 1_429);
        }
    }

    #[test]
    fn channel_count_parsing() {
        assert_eq!(ChannelCount::parse("unlimited"), Some(ChannelCount::UNLIMITED));
        assert_eq!(ChannelCount::parse("4"), Some(ChannelCount::Finite(4)));
        assert_eq!(ChannelCount::parse("0"), None);
        let v: ChannelCount = serde_json::from_str("\"unlimited\"").unwrap();
        assert_eq!(v, ChannelCount::UNLIMITED);
        let v: ChannelCount = serde_json::from_str("2").unwrap();
        assert_eq!(v, ChannelCount::Finite(2));
    }

    #[test]
    fn link_pays_rtt_and_flit() {
        let mut l = LinkModel::new(&LinkParams::default());
        assert_eq!(l.flit(), 2000);
        let at_dev = l.to_device(0);
        assert_eq!(l.to_host(at_dev), 70_000 + 2000);
        // second flit queues behind the first
        assert_eq!(l.to_device(0), 4000 + 35_000);
    }

    #[test]
    fn events_order_by_time_then_priority_then_fifo() {
        let mut q = EventQueue::default();
        q.push(10, Priority::Background, "bg");
        q.push(10, Priority::Foreground, "fg1");
        q.push(5, Priority::Background, "early");
        q.push(10, Priority::Foreground, "fg2");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, ["early", "fg1", "fg2", "bg"]);
    }

    proptest! {
        #[test]
        fn channel_work_conservation(addrs in proptest::collection::vec((0u64..1 << 20, 0u64..100_000), 1..300)) {
            let d = DramTiming::default();
            let mut ch = ChannelModel::new(ChannelCount::Finite(2), &d);
            let mut by_ch: Vec<Vec<(Time, Time)>> = vec![vec![]; 2];
            let mut sorted = addrs.clone();
            sorted.sort_by_key(|a| a.1);
            for (a, t) in sorted {
                let mpa = Mpa(a * 64);
                let c = ch.channel_of(mpa);
                let done = ch.submit(mpa, t);
                let start = done - d.access_latency_ps() - d.burst_ps();
                prop_assert!(start >= t);
                by_ch[c].push((start, start + d.burst_ps()));
            }
            // bursts on one channel never overlap, and throughput stays under the ceiling
            for spans in &by_ch {
                for w in spans.windows(2) {
                    prop_assert!(w[1].0 >= w[0].1);
                }
                if let (Some(first), Some(last)) = (spans.first(), spans.last()) {
                    let bytes = spans.len() as f64 * 64.0;
                    let secs = (last.1 - first.0) as f64 * 1e-12;
                    prop_assert!(bytes / secs <= d.bandwidth() * 1.01);
                }
            }
        }
    }
}
