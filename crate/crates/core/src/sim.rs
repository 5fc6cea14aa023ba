//! Event-driven simulation of one trace against one device.
//!
//! The host keeps at most `host.window` requests in flight; each completion
//! issues the next record. Requests reach the engine in trace order, and a
//! background demotion is scheduled right behind any arrival that leaves the
//! promoted region below its threshold. Engine state therefore evolves in
//! trace order and traffic does not depend on link or DRAM timing.

use std::collections::{BTreeMap, HashSet};

use crate::addr::{Ospa, Region, PAGE_SIZE};
use crate::compress::synthesize_page;
use crate::config::{Baseline, RunConfig};
use crate::engine::{Engine, FlatDevice, Line, Response};
use crate::error::{Result, SimError};
use crate::memory::DeviceMemory;
use crate::telemetry::report::{RatioReport, TrafficReport};
use crate::telemetry::{CacheReport, DemotionReport, LatencyStats, RatioSampler, Report};
use crate::timing::{EventQueue, LinkModel, Priority, Time};
use crate::workload::{Annotation, Op, Trace};

/// Requests between conservation checks.
pub const CHECKPOINT: u64 = 100_000;

pub enum Device {
    Ibex(Box<Engine>),
    Flat(FlatDevice),
}

impl Device {
    pub fn memory(&self) -> &DeviceMemory {
        match self {
            Device::Ibex(e) => e.memory(),
            Device::Flat(f) => f.memory(),
        }
    }

    fn memory_mut(&mut self) -> &mut DeviceMemory {
        match self {
            Device::Ibex(e) => e.memory_mut(),
            Device::Flat(f) => f.memory_mut(),
        }
    }

    fn preload(&mut self, ospn: u64, page: &[u8]) -> Result<()> {
        match self {
            Device::Ibex(e) => e.preload(ospn, page),
            Device::Flat(f) => {
                f.preload(ospn, page);
                Ok(())
            }
        }
    }

    fn handle(&mut self, op: Op, ospa: Ospa, payload: Option<&Line>, now: Time) -> Result<Response> {
        match self {
            Device::Ibex(e) => e.handle(op, ospa, payload, now),
            Device::Flat(f) => f.handle(op, ospa, payload, now),
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: Report,
    pub ratio_csv: String,
    pub breakdown_csv: String,
    pub event_log: Option<String>,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Arrive(usize),
    Complete(usize),
    Demote,
}

/// Seed for the initial content of `ospn`.
pub fn page_seed(run_seed: u64, ospn: u64) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ospn
}

pub struct Simulator {
    cfg: RunConfig,
    device: Device,
    label: String,
}

impl Simulator {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let device = match cfg.baseline {
            Baseline::Ibex => {
                let mut e = Engine::new(cfg.engine_config(), layout, cfg.channel_model())?;
                if cfg.telemetry.victim_audit {
                    e.activity_mut().enable_audit();
                }
                Device::Ibex(Box::new(e))
            }
            Baseline::Uncompressed => {
                Device::Flat(FlatDevice::new(layout.advertised_pages() * PAGE_SIZE, cfg.channel_model()))
            }
        };
        let mut sim = Simulator { cfg: cfg.clone(), device, label: "run".into() };
        if cfg.telemetry.event_log {
            sim.device.memory_mut().enable_log();
        }
        Ok(sim)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn engine(&self) -> Option<&Engine> {
        match &self.device {
            Device::Ibex(e) => Some(e),
            Device::Flat(_) => None,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Current contents of the line at `ospa`, without timing.
    pub fn read_line(&self, ospa: Ospa) -> Result<Line> {
        match &self.device {
            Device::Ibex(e) => e.read_line_functional(ospa),
            Device::Flat(f) => Ok(f.read_line_functional(ospa)),
        }
    }

    fn advertised(&self) -> u64 {
        match &self.device {
            Device::Ibex(e) => e.layout().advertised_pages() * PAGE_SIZE,
            Device::Flat(_) => self.cfg.layout().map(|l| l.advertised_pages() * PAGE_SIZE).unwrap_or(0),
        }
    }

    fn check_conservation(&self) -> Result<()> {
        let m = self.device.memory();
        if m.traffic().total() != m.channel_accesses() {
            return Err(SimError::Contract(format!(
                "traffic categories sum to {} but the channels saw {} accesses",
                m.traffic().total(),
                m.channel_accesses()
            )));
        }
        Ok(())
    }

    /// Replays `trace` to completion. Can be called once per simulator.
    pub fn run(&mut self, trace: &Trace) -> Result<SimOutput> {
        trace.validate(self.advertised())?;
        let annots = trace.page_annotations();
        let n = trace.records.len();
        let window = self.cfg.host.window.max(1) as usize;
        let mut link = LinkModel::new(&self.cfg.link());
        let mut q: EventQueue<Event> = EventQueue::default();
        let mut issued_at = vec![0 as Time; n];
        let mut next = 0usize;
        for _ in 0..window.min(n) {
            q.push(link.to_device(0), Priority::Foreground, Event::Arrive(next));
            next += 1;
        }

        let mut touched: HashSet<u64> = HashSet::new();
        let mut latency = LatencyStats::default();
        let mut ratio = RatioSampler::new(self.cfg.telemetry.ratio_sample_interval);
        let audit_every = self.cfg.telemetry.audit_interval;
        let mut served = 0u64;
        let mut done = 0usize;
        let mut demote_pending = false;
        let mut demote_free: Time = 0;
        let mut end: Time = 0;
        let (mut reads, mut writes) = (0u64, 0u64);

        while let Some((now, ev)) = q.pop() {
            end = end.max(now);
            match ev {
                Event::Arrive(i) => {
                    let r = &trace.records[i];
                    let ospn = r.ospa.ospn();
                    if touched.insert(ospn) {
                        if let Some(Annotation::Ratio(x)) = annots.get(&ospn) {
                            let page = synthesize_page(self.cfg.compression.backend, f64::from(*x), page_seed(self.cfg.seed, ospn));
                            self.device.preload(ospn, &page)?;
                        }
                    }
                    let payload = trace.payload(r);
                    match r.op {
                        Op::Read => reads += 1,
                        Op::Write => writes += 1,
                    }
                    let resp = self.device.handle(r.op, r.ospa, payload.as_ref(), now)?;
                    q.push(link.to_host(resp.done), Priority::Foreground, Event::Complete(i));
                    served += 1;

                    if let Device::Ibex(e) = &self.device {
                        if !demote_pending && e.needs_demotion() {
                            demote_pending = true;
                            q.push(now, Priority::Background, Event::Demote);
                        }
                        if ratio.due(served) {
                            ratio.push(served, now, e.allocated_bytes(), e.physical_bytes());
                        }
                        if audit_every > 0 && served % audit_every == 0 {
                            e.audit().map_err(|m| SimError::Contract(format!("audit after {served} requests: {m}")))?;
                        }
                    }
                    if served % CHECKPOINT == 0 {
                        self.check_conservation()?;
                    }
                }
                Event::Complete(i) => {
                    latency.record(now - issued_at[i]);
                    done += 1;
                    if next < n {
                        issued_at[next] = now;
                        q.push(link.to_device(now), Priority::Foreground, Event::Arrive(next));
                        next += 1;
                    }
                }
                Event::Demote => {
                    demote_pending = false;
                    if let Device::Ibex(e) = &mut self.device {
                        if e.needs_demotion() {
                            if let Some(t) = e.demote_one(now.max(demote_free))? {
                                demote_free = t;
                                end = end.max(t);
                            }
                        }
                    }
                }
            }
        }
        debug_assert_eq!(done, n);

        if let Device::Ibex(e) = &mut self.device {
            if let Some(last) = ratio.samples().last().map(|s| s.request) {
                if last != served {
                    ratio.push(served, end, e.allocated_bytes(), e.physical_bytes());
                }
            } else {
                ratio.push(served, end, e.allocated_bytes(), e.physical_bytes());
            }
            e.audit().map_err(|m| SimError::Contract(format!("final audit: {m}")))?;
        }
        self.check_conservation()?;

        let report = self.build_report(served, reads, writes, end, &latency, &ratio);
        let mem = self.device.memory();
        Ok(SimOutput {
            report,
            ratio_csv: ratio.to_csv(),
            breakdown_csv: mem.traffic().to_csv(),
            event_log: mem.log_csv(),
        })
    }

    fn build_report(
        &self,
        requests: u64,
        reads: u64,
        writes: u64,
        end: Time,
        latency: &LatencyStats,
        ratio: &RatioSampler,
    ) -> Report {
        let mem = self.device.memory();
        let by_region: BTreeMap<String, u64> = Region::ALL
            .iter()
            .map(|&r| (r.name().to_string(), mem.region_accesses(r)))
            .filter(|(_, v)| *v > 0)
            .collect();
        let traffic = TrafficReport::new(mem.traffic(), mem.channel_accesses(), by_region);
        let e = self.engine();
        Report {
            label: self.label.clone(),
            baseline: match self.cfg.baseline {
                Baseline::Ibex => "ibex".into(),
                Baseline::Uncompressed => "uncompressed".into(),
            },
            mode: e.map(|e| e.config().mode.name().into()),
            format: e.map(|e| e.config().format.name().into()),
            shadowed_promotion: e.map(|e| e.config().shadowed_promotion),
            backend: e.map(|e| e.config().backend.name().into()),
            seed: self.cfg.seed,
            requests,
            reads,
            writes,
            sim_time_ps: end,
            traffic,
            latency: latency.summary(),
            ratio: RatioReport {
                geomean: ratio.geomean(),
                samples: ratio.samples().len(),
                allocated_bytes: e.map_or(0, |e| e.allocated_bytes()),
                physical_bytes: e.map_or(0, |e| e.physical_bytes()),
                shadow_bytes: e.map_or(0, |e| e.shadow_bytes()),
            },
            metadata_cache: e.map(|e| CacheReport::new(&e.cache_stats(), e.activity().stats.lazy_updates)),
            demotion: e.map(|e| DemotionReport::new(&e.activity().stats, e.stats())),
            engine: e.map(|e| e.stats().clone()),
            allocator: e.map(|e| e.allocator().snapshot()),
        }
    }
}
