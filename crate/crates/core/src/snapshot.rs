//! Metadata snapshots: every non-zero translation entry of a finished run in
//! its on-device encoding, readable by `cmx dump-meta`.
//!
//! Layout: `b"CMXSNAP1"`, format byte, u32 LE length + layout JSON, u64 LE
//! entry count, then per entry a u64 LE OSPN followed by the encoded entry.

use std::path::Path;

use crate::addr::DeviceLayout;
use crate::engine::Engine;
use crate::error::{CodecError, Result};
use crate::metadata::{MetadataFormat, PageEntry};

pub const MAGIC: &[u8; 8] = b"CMXSNAP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub format: MetadataFormat,
    pub layout: DeviceLayout,
    pub entries: Vec<(u64, PageEntry)>,
}

fn format_code(f: MetadataFormat) -> u8 {
    match f {
        MetadataFormat::Naive => 0,
        MetadataFormat::Colocated => 1,
        MetadataFormat::Compact => 2,
    }
}

fn malformed(m: impl Into<String>) -> CodecError {
    CodecError::Malformed(m.into())
}

impl Snapshot {
    pub fn capture(engine: &Engine) -> Result<Self> {
        let mut entries = Vec::new();
        for o in engine.nonzero_pages() {
            entries.push((o, engine.entry(o)?));
        }
        Ok(Snapshot { format: engine.config().format, layout: engine.layout().clone(), entries })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.layout).expect("layout serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(format_code(self.format));
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (o, e) in &self.entries {
            out.extend_from_slice(&o.to_le_bytes());
            out.extend_from_slice(&self.format.encode(e, &self.layout)?);
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut cur = b;
        let mut take = |n: usize| -> std::result::Result<&[u8], CodecError> {
            if cur.len() < n {
                return Err(malformed("snapshot truncated"));
            }
            let (h, t) = cur.split_at(n);
            cur = t;
            Ok(h)
        };
        if take(8)? != MAGIC {
            return Err(malformed("not a snapshot (bad magic)").into());
        }
        let format = match take(1)?[0] {
            0 => MetadataFormat::Naive,
            1 => MetadataFormat::Colocated,
            2 => MetadataFormat::Compact,
            x => return Err(malformed(format!("unknown format code {x}")).into()),
        };
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let layout: DeviceLayout =
            serde_json::from_slice(take(n)?).map_err(|e| malformed(format!("layout: {e}")))?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut entries = Vec::new();
        for _ in 0..count {
            let o = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let e = format.decode(take(format.encoded_len())?, &layout)?;
            entries.push((o, e));
        }
        if !take(0)?.is_empty() || !cur.is_empty() {
            return Err(malformed("trailing bytes after the last entry").into());
        }
        Ok(Snapshot { format, layout, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One human-readable line per entry.
pub fn describe(ospn: u64, e: &PageEntry) -> String {
    let blocks: Vec<String> = e.blocks.iter().map(|b| format!("{}/{}", b.kind.name(), b.size_code)).collect();
    let chunks: Vec<String> = e.chunks.as_slice().iter().map(|c| format!("{:#x}", c.0)).collect();
    let state = match (e.pchunk.is_some(), e.chunks.is_empty()) {
        (true, false) => "promoted-clean",
        (true, true) => "promoted-dirty",
        (false, true) => "zero",
        (false, false) => "stored",
    };
    format!(
        "ospn={ospn:#x} state={state} blocks=[{}] chunks=[{}] pchunk={} wr_cntr={}",
        blocks.join(","),
        chunks.join(","),
        e.pchunk.map_or("-".to_string(), |p| format!("{:#x}", p.0)),
        e.wr_cntr
    )
}
