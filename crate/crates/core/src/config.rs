//! Run configuration: one TOML file, fully defaulted, with dotted-key
//! overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::addr::{DeviceLayout, LayoutParams, PHYS_ADDR_BITS};
use crate::compress::{BackendKind, CompressionMode, LatencyModel};
use crate::engine::{EngineConfig, ExhaustionPolicy};
use crate::error::{Result, SimError};
use crate::meta_cache::MetaCacheConfig;
use crate::metadata::MetadataFormat;
use crate::timing::{cycle_ps, ChannelCount, ChannelModel, DramTiming, LinkParams};
use crate::workload::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Ibex,
    Uncompressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub physical_capacity: u64,
    pub advertised_capacity: Option<u64>,
    pub compressed_size: u64,
    pub promoted_size: u64,
    pub sub_region_size: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let p = LayoutParams::default();
        LayoutConfig {
            physical_capacity: p.physical_capacity,
            advertised_capacity: p.advertised_capacity,
            compressed_size: p.compressed_size,
            promoted_size: p.promoted_size,
            sub_region_size: p.sub_region_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IbexConfig {
    pub shadowed_promotion: bool,
    pub colocate: bool,
    pub compaction: bool,
    pub demotion_threshold: u64,
    pub exhaustion: ExhaustionPolicy,
    /// Optional explicit settings; must agree with the flags above.
    pub mode: Option<CompressionMode>,
    pub format: Option<MetadataFormat>,
}

impl Default for IbexConfig {
    fn default() -> Self {
        IbexConfig {
            shadowed_promotion: true,
            colocate: true,
            compaction: true,
            demotion_threshold: crate::alloc::DEMOTION_THRESHOLD,
            exhaustion: ExhaustionPolicy::Abort,
            mode: None,
            format: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub backend: BackendKind,
    pub compress_cycles_per_kib: u64,
    pub decompress_cycles_per_kib: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        let l = LatencyModel::default();
        CompressionConfig {
            backend: BackendKind::Lz77,
            compress_cycles_per_kib: l.compress_cycles_per_kib,
            decompress_cycles_per_kib: l.decompress_cycles_per_kib,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub device_clock_hz: f64,
    pub channels: ChannelCount,
    pub link_latency_ns: f64,
    pub link_bandwidth_gbps: f64,
    pub dram: DramTiming,
}

impl Default for TimingConfig {
    fn default() -> Self {
        let link = LinkParams::default();
        TimingConfig {
            device_clock_hz: 2e9,
            channels: ChannelCount::Finite(2),
            link_latency_ns: link.round_trip_ns,
            link_bandwidth_gbps: link.bandwidth_gbps,
            dram: DramTiming::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    /// Maximum outstanding requests.
    pub window: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig { window: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    pub ratio_sample_interval: u64,
    pub event_log: bool,
    /// Run the cross-module audit every this many requests (0 = never).
    pub audit_interval: u64,
    /// Keep every demotion victim for soundness checks.
    pub victim_audit: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig { ratio_sample_interval: 100_000, event_log: false, audit_interval: 0, victim_audit: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub trace: Option<PathBuf>,
    pub blob: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Flips each read into a write with this probability.
    pub write_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub baseline: Baseline,
    pub layout: LayoutConfig,
    pub ibex: IbexConfig,
    pub metadata_cache: MetaCacheConfig,
    pub compression: CompressionConfig,
    pub timing: TimingConfig,
    pub host: HostConfig,
    pub telemetry: TelemetryConfig,
    pub workload: WorkloadConfig,
}

/// Short names accepted by `sweep --axis`.
pub fn resolve_axis(axis: &str) -> &str {
    match axis {
        "link_latency" => "timing.link_latency_ns",
        "decompress_cycles" => "compression.decompress_cycles_per_kib",
        "compress_cycles" => "compression.compress_cycles_per_kib",
        "channels" => "timing.channels",
        "write_probability" => "workload.write_probability",
        "read_ratio" => "workload.synthetic.read_ratio",
        "promoted_size" => "layout.promoted_size",
        other => other,
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key = value` inside `table`, creating sub-tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SimError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = resolve_axis(key.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| SimError::Config("empty override key".into()))?;
    let mut cur = table;
    for p in parts {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| SimError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(src: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(src).map_err(|e| SimError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative trace paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&src, overrides)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.workload.trace, &mut cfg.workload.blob].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Returns a copy with overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| SimError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> CompressionMode {
        if self.ibex.colocate {
            CompressionMode::Colocated1k
        } else {
            CompressionMode::Page4k
        }
    }

    pub fn format(&self) -> MetadataFormat {
        match (self.ibex.colocate, self.ibex.compaction) {
            (true, true) => MetadataFormat::Compact,
            (true, false) => MetadataFormat::Colocated,
            _ => MetadataFormat::Naive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.ibex.compaction && !self.ibex.colocate {
            return bad("ibex.compaction requires ibex.colocate (the compact entry is a co-located entry)".into());
        }
        if let Some(m) = self.ibex.mode {
            if m != self.mode() {
                return bad(format!("ibex.mode = {} contradicts ibex.colocate = {}", m.name(), self.ibex.colocate));
            }
        }
        if let Some(f) = self.ibex.format {
            if f != self.format() {
                return bad(format!(
                    "ibex.format = {} contradicts colocate = {}, compaction = {} (which select {})",
                    f.name(),
                    self.ibex.colocate,
                    self.ibex.compaction,
                    self.format().name()
                ));
            }
        }
        let c = &self.metadata_cache;
        if c.ways == 0 || c.line_bytes != 64 || c.capacity_bytes % (c.line_bytes * u64::from(c.ways)) != 0 || c.sets() == 0 {
            return bad("metadata_cache: 64B lines, non-zero ways, and capacity a multiple of ways x 64B".into());
        }
        if !(self.timing.device_clock_hz > 0.0) {
            return bad("timing.device_clock_hz must be positive".into());
        }
        if !(self.timing.link_latency_ns >= 0.0) || !(self.timing.link_bandwidth_gbps > 0.0) {
            return bad("timing.link_latency_ns must be >= 0 and link_bandwidth_gbps > 0".into());
        }
        if self.timing.channels == ChannelCount::Finite(0) {
            return bad("timing.channels must be at least 1 or \"unlimited\"".into());
        }
        let d = &self.timing.dram;
        if !(d.data_rate_mts > 0.0) || d.bus_bytes == 0 {
            return bad("timing.dram needs a positive data rate and bus width".into());
        }
        if self.compression.compress_cycles_per_kib == 0 || self.compression.decompress_cycles_per_kib == 0 {
            return bad("compression cycle counts must be positive".into());
        }
        if self.host.window == 0 {
            return bad("host.window must be at least 1".into());
        }
        if self.telemetry.ratio_sample_interval == 0 {
            return bad("telemetry.ratio_sample_interval must be at least 1".into());
        }
        if self.layout.physical_capacity > 1 << PHYS_ADDR_BITS {
            return bad("layout.physical_capacity exceeds the 41-bit device address space".into());
        }
        if let Some(p) = self.workload.write_probability {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("workload.write_probability {p} is not a probability"));
            }
        }
        match (&self.workload.trace, &self.workload.synthetic) {
            (Some(_), Some(_)) => return bad("workload: give either `trace` or `synthetic`, not both".into()),
            (None, Some(s)) => s.validate().map_err(|e| SimError::Config(e.to_string()))?,
            _ => {}
        }
        self.layout()?;
        Ok(())
    }

    pub fn layout_params(&self) -> LayoutParams {
        LayoutParams {
            physical_capacity: self.layout.physical_capacity,
            advertised_capacity: self.layout.advertised_capacity,
            compressed_size: self.layout.compressed_size,
            promoted_size: self.layout.promoted_size,
            sub_region_size: self.layout.sub_region_size,
            metadata_pitch_bits: self.format().pitch_bits(),
        }
    }

    pub fn layout(&self) -> Result<DeviceLayout> {
        DeviceLayout::new(&self.layout_params()).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn cycle_ps(&self) -> u64 {
        cycle_ps(self.timing.device_clock_hz)
    }

    pub fn latency(&self) -> LatencyModel {
        LatencyModel {
            compress_cycles_per_kib: self.compression.compress_cycles_per_kib,
            decompress_cycles_per_kib: self.compression.decompress_cycles_per_kib,
            cycle_ps: self.cycle_ps(),
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            mode: self.mode(),
            format: self.format(),
            shadowed_promotion: self.ibex.shadowed_promotion,
            backend: self.compression.backend,
            latency: self.latency(),
            cache: self.metadata_cache,
            demotion_threshold: self.ibex.demotion_threshold,
            exhaustion: self.ibex.exhaustion,
            seed: self.seed,
        }
    }

    pub fn channel_model(&self) -> ChannelModel {
        ChannelModel::new(self.timing.channels, &self.timing.dram)
    }

    pub fn link(&self) -> LinkParams {
        LinkParams { round_trip_ns: self.timing.link_latency_ns, bandwidth_gbps: self.timing.link_bandwidth_gbps }
    }

    /// The four incremental configurations: base, +S, +S+C, +S+C+M.
    pub fn ablation_steps(&self) -> Vec<(&'static str, RunConfig)> {
        let step = |s: bool, c: bool, m: bool| {
            let mut r = self.clone();
            r.baseline = Baseline::Ibex;
            r.ibex.shadowed_promotion = s;
            r.ibex.colocate = c;
            r.ibex.compaction = m;
            r.ibex.mode = None;
            r.ibex.format = None;
            r
        };
        vec![
            ("base", step(false, false, false)),
            ("+S", step(true, false, false)),
            ("+S+C", step(true, true, false)),
            ("+S+C+M", step(true, true, true)),
        ]
    }
}
