//! Trace records, the text and binary trace formats, and the synthetic
//! workload generator.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{Ospa, LINES_PER_PAGE, LINE_SIZE, PAGE_SHIFT};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("binary record {record}: {msg}")]
    Binary { record: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("record {record}: payload offset {offset} outside the {len}-byte blob")]
    Payload { record: usize, offset: u64, len: usize },
    #[error("record {record}: ospa {ospa:#x} beyond advertised capacity {limit:#x}")]
    OutOfRange { record: usize, ospa: u64, limit: u64 },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

/// Per-record annotation. `Zero` and `Ratio` describe the page's content on
/// first reference; `Payload` is the 64B written by a write.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Annotation {
    None,
    Zero,
    Ratio(f32),
    Payload(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub op: Op,
    pub ospa: Ospa,
    pub annot: Annotation,
}

impl TraceRecord {
    pub fn read(ospa: u64) -> Self {
        TraceRecord { op: Op::Read, ospa: Ospa(ospa), annot: Annotation::None }
    }

    pub fn write(ospa: u64) -> Self {
        TraceRecord { op: Op::Write, ospa: Ospa(ospa), annot: Annotation::None }
    }

    pub fn with(mut self, annot: Annotation) -> Self {
        self.annot = annot;
        self
    }
}

/// A request stream plus the payload blob its records index into.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub blob: Vec<u8>,
}

impl Trace {
    pub fn new(records: Vec<TraceRecord>) -> Self {
        Trace { records, blob: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn payload(&self, r: &TraceRecord) -> Option<[u8; 64]> {
        match r.annot {
            Annotation::Payload(off) => {
                let off = off as usize;
                self.blob.get(off..off + 64).map(|s| s.try_into().unwrap())
            }
            _ => None,
        }
    }

    /// Appends a payload to the blob and returns its annotation.
    pub fn add_payload(&mut self, data: &[u8; 64]) -> Annotation {
        let off = self.blob.len() as u64;
        self.blob.extend_from_slice(data);
        Annotation::Payload(off)
    }

    /// Checks addresses against the advertised capacity and payload offsets
    /// against the blob.
    pub fn validate(&self, advertised_capacity: u64) -> Result<(), TraceError> {
        for (i, r) in self.records.iter().enumerate() {
            if r.ospa.0 >= advertised_capacity {
                return Err(TraceError::OutOfRange { record: i, ospa: r.ospa.0, limit: advertised_capacity });
            }
            if let Annotation::Payload(off) = r.annot {
                if off as usize + 64 > self.blob.len() {
                    return Err(TraceError::Payload { record: i, offset: off, len: self.blob.len() });
                }
            }
        }
        Ok(())
    }

    /// Highest OSPA referenced plus one page, or 0 for an empty trace.
    pub fn span(&self) -> u64 {
        self.records.iter().map(|r| (r.ospa.ospn() + 1) << PAGE_SHIFT).max().unwrap_or(0)
    }

    /// The first content annotation (`Z` or `ratio=`) seen for each page.
    pub fn page_annotations(&self) -> HashMap<u64, Annotation> {
        let mut m = HashMap::new();
        for r in &self.records {
            if matches!(r.annot, Annotation::Zero | Annotation::Ratio(_)) {
                m.entry(r.ospa.ospn()).or_insert(r.annot);
            }
        }
        m
    }
}

fn fold_pid(ospa: u64, pid: u64) -> u64 {
    ospa.wrapping_add(pid << 32)
}

/// Parses the text format: `R|W <hex-ospa> [Z|ratio=<f>|payload=<off>] [pid=<n>]`.
pub fn parse_text(src: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (n, raw) in src.lines().enumerate() {
        let line = n + 1;
        let err = |msg: String| TraceError::Parse { line, msg };
        let text = raw.split('#').next().unwrap().trim();
        if text.is_empty() {
            continue;
        }
        let mut tok = text.split_whitespace();
        let op = match tok.next().unwrap() {
            "R" | "r" => Op::Read,
            "W" | "w" => Op::Write,
            other => return Err(err(format!("unknown op `{other}`, expected R or W"))),
        };
        let addr = tok.next().ok_or_else(|| err("missing address".into()))?;
        let hex = addr.strip_prefix("0x").or_else(|| addr.strip_prefix("0X")).unwrap_or(addr);
        let mut ospa = u64::from_str_radix(hex, 16).map_err(|e| err(format!("bad address `{addr}`: {e}")))?;
        let mut annot = Annotation::None;
        for t in tok {
            let set = |a: &mut Annotation, v: Annotation| {
                if *a != Annotation::None {
                    return Err(err("more than one annotation".into()));
                }
                *a = v;
                Ok(())
            };
            if t == "Z" || t == "z" {
                set(&mut annot, Annotation::Zero)?;
            } else if let Some(v) = t.strip_prefix("ratio=") {
                let r: f32 = v.parse().map_err(|e| err(format!("bad ratio `{v}`: {e}")))?;
                if !(r.is_finite() && r > 0.0) {
                    return Err(err(format!("ratio must be positive, got {r}")));
                }
                set(&mut annot, Annotation::Ratio(r))?;
            } else if let Some(v) = t.strip_prefix("payload=") {
                let off = v.parse().map_err(|e| err(format!("bad payload offset `{v}`: {e}")))?;
                if op == Op::Read {
                    return Err(err("payloads are only valid on writes".into()));
                }
                set(&mut annot, Annotation::Payload(off))?;
            } else if let Some(v) = t.strip_prefix("pid=") {
                let pid: u16 = v.parse().map_err(|e| err(format!("bad pid `{v}`: {e}")))?;
                ospa = fold_pid(ospa, pid.into());
            } else {
                return Err(err(format!("unexpected token `{t}`")));
            }
        }
        out.push(TraceRecord { op, ospa: Ospa(ospa & !(LINE_SIZE - 1)), annot });
    }
    Ok(out)
}

pub fn to_text(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let op = if r.op == Op::Read { 'R' } else { 'W' };
        s.push_str(&format!("{op} {:#x}", r.ospa.0));
        match r.annot {
            Annotation::None => {}
            Annotation::Zero => s.push_str(" Z"),
            Annotation::Ratio(v) => s.push_str(&format!(" ratio={v}")),
            Annotation::Payload(o) => s.push_str(&format!(" payload={o}")),
        }
        s.push('\n');
    }
    s
}

pub const BINARY_MAGIC: &[u8; 8] = b"CMXTRACE";
pub const BINARY_VERSION: u32 = 1;
pub const BINARY_HEADER: usize = 16;
pub const BINARY_RECORD: usize = 24;

pub fn to_binary(records: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER + records.len() * BINARY_RECORD);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for r in records {
        let (code, ratio, off) = match r.annot {
            Annotation::None => (0u8, 0f32, 0u64),
            Annotation::Zero => (1, 0.0, 0),
            Annotation::Ratio(v) => (2, v, 0),
            Annotation::Payload(o) => (3, 0.0, o),
        };
        out.push(if r.op == Op::Read { 0 } else { 1 });
        out.push(code);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&r.ospa.0.to_le_bytes());
        out.extend_from_slice(&ratio.to_le_bytes());
        out.extend_from_slice(&off.to_le_bytes());
    }
    out
}

pub fn parse_binary(bytes: &[u8]) -> Result<Vec<TraceRecord>, TraceError> {
    let head = |msg: &str| TraceError::Binary { record: 0, msg: msg.into() };
    if bytes.len() < BINARY_HEADER || &bytes[..8] != BINARY_MAGIC {
        return Err(head("missing CMXTRACE header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(head(&format!("unsupported version {version}")));
    }
    let body = &bytes[BINARY_HEADER..];
    if body.len() % BINARY_RECORD != 0 {
        return Err(head(&format!("body length {} is not a multiple of {BINARY_RECORD}", body.len())));
    }
    body.chunks(BINARY_RECORD)
        .enumerate()
        .map(|(i, b)| {
            let err = |msg: String| TraceError::Binary { record: i, msg };
            let op = match b[0] {
                0 => Op::Read,
                1 => Op::Write,
                x => return Err(err(format!("bad op byte {x}"))),
            };
            let pid = u16::from_le_bytes([b[2], b[3]]);
            let ospa = fold_pid(u64::from_le_bytes(b[4..12].try_into().unwrap()), pid.into());
            let ratio = f32::from_le_bytes(b[12..16].try_into().unwrap());
            let off = u64::from_le_bytes(b[16..24].try_into().unwrap());
            let annot = match b[1] {
                0 => Annotation::None,
                1 => Annotation::Zero,
                2 if ratio.is_finite() && ratio > 0.0 => Annotation::Ratio(ratio),
                2 => return Err(err(format!("ratio must be positive, got {ratio}"))),
                3 if op == Op::Write => Annotation::Payload(off),
                3 => return Err(err("payloads are only valid on writes".into())),
                x => return Err(err(format!("bad annotation byte {x}"))),
            };
            Ok(TraceRecord { op, ospa: Ospa(ospa & !(LINE_SIZE - 1)), annot })
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io { path: path.to_path_buf(), source }
}

/// Sidecar blob location for a trace file: `<trace>.blob`.
pub fn default_blob_path(trace: &Path) -> PathBuf {
    let mut s = trace.as_os_str().to_owned();
    s.push(".blob");
    PathBuf::from(s)
}

/// Loads a text or binary trace (detected by header) plus its blob, if any.
pub fn load_trace(path: &Path, blob: Option<&Path>) -> Result<Trace, TraceError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let records = if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes)?
    } else {
        let text = String::from_utf8(bytes).map_err(|e| TraceError::Parse { line: 0, msg: format!("not UTF-8: {e}") })?;
        parse_text(&text)?
    };
    let blob_path = blob.map(Path::to_path_buf).unwrap_or_else(|| default_blob_path(path));
    let blob = match std::fs::read(&blob_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && blob.is_none() => Vec::new(),
        Err(e) => return Err(io_err(&blob_path)(e)),
    };
    Ok(Trace { records, blob })
}

pub fn save_trace(trace: &Trace, path: &Path, binary: bool) -> Result<(), TraceError> {
    let body = if binary { to_binary(&trace.records) } else { to_text(&trace.records).into_bytes() };
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&body).map_err(io_err(path))?;
    if !trace.blob.is_empty() {
        let bp = default_blob_path(path);
        std::fs::write(&bp, &trace.blob).map_err(io_err(&bp))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBucket {
    pub ratio: f64,
    pub weight: f64,
}

/// Parameters of a synthetic workload. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub footprint_pages: u64,
    /// Size of the OSPN range pages are scattered over; defaults to four
    /// times the footprint.
    pub address_pages: Option<u64>,
    pub hot_fraction: f64,
    pub hot_probability: f64,
    /// When set, page popularity follows Zipf(s) instead of the two-level mix.
    pub zipf: Option<f64>,
    /// Fraction of requests that are reads.
    pub read_ratio: f64,
    pub zero_fraction: f64,
    pub ratios: Vec<RatioBucket>,
    pub request_count: u64,
    /// Writes carry 64B payloads shaped like their page's content.
    pub payloads: bool,
    /// Consecutive requests that stay on one page before re-drawing.
    pub burst: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            footprint_pages: 4096,
            address_pages: None,
            hot_fraction: 0.2,
            hot_probability: 0.8,
            zipf: None,
            read_ratio: 0.8,
            zero_fraction: 0.2,
            ratios: vec![
                RatioBucket { ratio: 1.0, weight: 0.1 },
                RatioBucket { ratio: 2.0, weight: 0.4 },
                RatioBucket { ratio: 3.0, weight: 0.3 },
                RatioBucket { ratio: 4.0, weight: 0.2 },
            ],
            request_count: 100_000,
            payloads: false,
            burst: 1,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::Spec(m));
        if self.footprint_pages == 0 {
            return bad("footprint_pages must be positive".into());
        }
        if self.address_pages.is_some_and(|a| a < self.footprint_pages) {
            return bad("address_pages must cover the footprint".into());
        }
        for (name, v) in [
            ("hot_fraction", self.hot_fraction),
            ("hot_probability", self.hot_probability),
            ("read_ratio", self.read_ratio),
            ("zero_fraction", self.zero_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.zipf.is_some_and(|s| !(s > 0.0)) {
            return bad("zipf exponent must be positive".into());
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|b| !(b.ratio > 0.0) || b.weight < 0.0) {
            return bad("ratios need at least one bucket with positive ratio and non-negative weight".into());
        }
        if self.ratios.iter().map(|b| b.weight).sum::<f64>() <= 0.0 {
            return bad("ratio weights sum to zero".into());
        }
        Ok(())
    }
}

/// Content class drawn for each synthetic page.
fn draw_content(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Annotation {
    if rng.random_bool(spec.zero_fraction) {
        return Annotation::Zero;
    }
    let total: f64 = spec.ratios.iter().map(|b| b.weight).sum();
    let mut x = rng.random_range(0.0..total);
    for b in &spec.ratios {
        if x < b.weight {
            return Annotation::Ratio(b.ratio as f32);
        }
        x -= b.weight;
    }
    Annotation::Ratio(spec.ratios.last().unwrap().ratio as f32)
}

/// Payload shaped like a page of the given ratio: random head, zero tail.
fn shaped_payload(annot: Annotation, rng: &mut ChaCha8Rng) -> [u8; 64] {
    let mut p = [0u8; 64];
    let live = match annot {
        Annotation::Ratio(r) if r <= 1.0 => 64,
        Annotation::Ratio(r) => ((64.0 / f64::from(r)).round() as usize).clamp(1, 64),
        _ => 0,
    };
    rng.fill(&mut p[..live]);
    p
}

/// Deterministic request stream from `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Trace, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = spec.address_pages.unwrap_or(spec.footprint_pages * 4);
    // Random OS page allocation: pages scattered over the OSPN range.
    let mut pages: Vec<u64> = rand::seq::index::sample(&mut rng, span as usize, spec.footprint_pages as usize)
        .into_iter()
        .map(|p| p as u64)
        .collect();
    pages.shuffle(&mut rng);
    let content: Vec<Annotation> = pages.iter().map(|_| draw_content(spec, &mut rng)).collect();
    let hot = ((spec.footprint_pages as f64 * spec.hot_fraction).round() as usize).clamp(1, pages.len());
    let zipf = spec.zipf.map(|s| Zipf::new(pages.len() as f64, s).expect("validated exponent"));

    let mut trace = Trace::default();
    let mut seen = vec![false; pages.len()];
    let mut current = 0usize;
    for i in 0..spec.request_count {
        if i % spec.burst.max(1) == 0 {
            current = match &zipf {
                Some(z) => z.sample(&mut rng) as usize - 1,
                None if rng.random_bool(spec.hot_probability) => rng.random_range(0..hot),
                None if hot < pages.len() => rng.random_range(hot..pages.len()),
                None => rng.random_range(0..pages.len()),
            };
        }
        let line = rng.random_range(0..LINES_PER_PAGE);
        let ospa = (pages[current] << PAGE_SHIFT) | (line * LINE_SIZE);
        let op = if rng.random_bool(spec.read_ratio) { Op::Read } else { Op::Write };
        let mut rec = TraceRecord { op, ospa: Ospa(ospa), annot: Annotation::None };
        if !seen[current] {
            seen[current] = true;
            rec.annot = content[current];
        } else if op == Op::Write && spec.payloads {
            let p = shaped_payload(content[current], &mut rng);
            rec.annot = trace.add_payload(&p);
        }
        trace.records.push(rec);
    }
    Ok(trace)
}

/// Flips each read into a write with independent probability `write_prob`.
/// Flipped records keep their content annotation and carry no payload.
pub fn instrument_writes(records: &[TraceRecord], write_prob: f64, seed: u64) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = write_prob.clamp(0.0, 1.0);
    records
        .iter()
        .map(|r| {
            let mut r = *r;
            if r.op == Op::Read && rng.random_bool(p) {
                r.op = Op::Write;
            }
            r
        })
        .collect()
}
