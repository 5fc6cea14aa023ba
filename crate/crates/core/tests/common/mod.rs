#![allow(dead_code)]

use std::collections::HashMap;

use cmx_core::addr::{Ospa, PAGE_SIZE};
use cmx_core::compress::{synthesize_page, BackendKind};
use cmx_core::config::RunConfig;
use cmx_core::sim::{page_seed, Simulator};
use cmx_core::workload::{Annotation, Op, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A device small enough that a few thousand pages put the promoted region
/// under pressure: 16MB compressed in four sub-regions, `promoted` bytes of
/// P-chunks.
pub fn small_config(promoted: u64) -> RunConfig {
    RunConfig::from_toml(
        &format!(
            "[layout]\ncompressed_size = 16777216\nsub_region_size = 4194304\npromoted_size = {promoted}\n\
             [telemetry]\nratio_sample_interval = 1000\n"
        ),
        &[],
    )
    .unwrap()
}

/// Flat byte-per-line model of what the device should hold after `trace`.
pub struct Reference {
    lines: HashMap<u64, [u8; 64]>,
    backend: BackendKind,
    seed: u64,
    annots: HashMap<u64, Annotation>,
}

impl Reference {
    pub fn new(trace: &Trace, cfg: &RunConfig) -> Self {
        Reference {
            lines: HashMap::new(),
            backend: cfg.compression.backend,
            seed: cfg.seed,
            annots: trace.page_annotations(),
        }
    }

    fn initial(&self, line: u64) -> [u8; 64] {
        let ospn = line / PAGE_SIZE;
        match self.annots.get(&ospn) {
            Some(Annotation::Ratio(r)) => {
                let page = synthesize_page(self.backend, f64::from(*r), page_seed(self.seed, ospn));
                let off = (line % PAGE_SIZE) as usize;
                page[off..off + 64].try_into().unwrap()
            }
            _ => [0; 64],
        }
    }

    pub fn replay(trace: &Trace, cfg: &RunConfig) -> Self {
        let mut r = Reference::new(trace, cfg);
        for rec in &trace.records {
            let line = rec.ospa.line_aligned().0;
            if rec.op == Op::Write {
                if let Some(p) = trace.payload(rec) {
                    r.lines.insert(line, p);
                }
            }
        }
        r
    }

    pub fn line(&self, addr: u64) -> [u8; 64] {
        let line = addr & !63;
        self.lines.get(&line).copied().unwrap_or_else(|| self.initial(line))
    }
}

/// Compares every touched line of `trace` between the simulator and the
/// reference; returns the first mismatching address.
pub fn first_mismatch(sim: &Simulator, trace: &Trace, reference: &Reference) -> Option<u64> {
    let mut addrs: Vec<u64> = trace.records.iter().map(|r| r.ospa.line_aligned().0).collect();
    addrs.sort_unstable();
    addrs.dedup();
    addrs.into_iter().find(|&a| sim.read_line(Ospa(a)).unwrap() != reference.line(a))
}

/// Random 64B payload: mostly compressible, sometimes noise, sometimes zero.
pub fn payload(rng: &mut ChaCha8Rng) -> [u8; 64] {
    let mut p = [0u8; 64];
    match rng.random_range(0..4) {
        0 => {}
        1 => rng.fill(&mut p[..]),
        _ => {
            let v: u8 = rng.random();
            p.iter_mut().take(rng.random_range(1..64)).for_each(|b| *b = v);
        }
    }
    p
}

/// Mixed read/write trace over `pages` pages scattered in the first
/// `span` pages; first touches carry a ratio or zero annotation, writes carry
/// payloads with probability `payload_p`.
pub fn mixed_trace(seed: u64, n: usize, pages: u64, span: u64, write_p: f64, payload_p: f64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ospns: Vec<u64> = rand::seq::index::sample(&mut rng, span as usize, pages as usize)
        .into_iter()
        .map(|x| x as u64)
        .collect();
    let mut trace = Trace::default();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n {
        // Skewed: half the requests go to the first eighth of the pages.
        let i = if rng.random_bool(0.5) {
            rng.random_range(0..(pages / 8).max(1))
        } else {
            rng.random_range(0..pages)
        } as usize;
        let ospn = ospns[i];
        let addr = ospn * PAGE_SIZE + rng.random_range(0..64u64) * 64;
        let write = rng.random_bool(write_p);
        let mut rec = if write {
            cmx_core::workload::TraceRecord::write(addr)
        } else {
            cmx_core::workload::TraceRecord::read(addr)
        };
        if seen.insert(ospn) {
            let annot = match rng.random_range(0..10) {
                0 | 1 => Annotation::Zero,
                2 => Annotation::Ratio(1.0),
                k => Annotation::Ratio([1.5f32, 2.0, 3.0, 4.0, 6.0, 8.0, 2.5][k as usize - 3]),
            };
            rec = rec.with(annot);
        } else if write && rng.random_bool(payload_p) {
            let p = payload(&mut rng);
            rec = rec.with(trace.add_payload(&p));
        }
        trace.records.push(rec);
    }
    trace
}
