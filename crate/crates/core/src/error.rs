use thiserror::Error;

/// Address arithmetic and layout failures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("address fault: {what} {value:#x} outside [0, {limit:#x})")]
    AddressFault {
        what: &'static str,
        value: u64,
        limit: u64,
    },
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("invalid layout: {0}")]
    Layout(String),
}

/// Metadata and activity entry codec failures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("field `{field}` value {value} exceeds {bits} bits")]
    FieldOverflow {
        field: &'static str,
        value: u64,
        bits: u32,
    },
    #[error("inconsistent entry: {0}")]
    Inconsistent(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Addr(#[from] AddrError),
}

/// Errors surfaced by a running simulation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trace error: {0}")]
    Trace(#[from] crate::workload::TraceError),
    #[error("capacity exhausted: no sub-region has {needed} free C-chunks")]
    CapacityExhausted { needed: usize },
    #[error(transparent)]
    Addr(#[from] AddrError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
