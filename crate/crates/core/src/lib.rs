//! Trace-driven discrete-event simulator of a compressed CXL memory
//! expander with promotion-based block compression, shadowed promotion,
//! block co-location and compacted translation metadata.
//!
//! The usual entry point is [`experiments::run`] with a [`config::RunConfig`]
//! and a [`workload::Trace`].

pub mod activity;
pub mod addr;
pub mod alloc;
pub mod compress;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod memory;
pub mod meta_cache;
pub mod metadata;
pub mod sim;
pub mod snapshot;
pub mod telemetry;
pub mod timing;
pub mod workload;

pub use error::{Result, SimError};
