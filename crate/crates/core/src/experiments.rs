//! Run orchestration: single runs, parameter sweeps and the ablation ladder.

use rayon::prelude::*;

use crate::config::{resolve_axis, RunConfig};
use crate::error::{Result, SimError};
use crate::sim::{SimOutput, Simulator};
use crate::workload::{generate, instrument_writes, load_trace, Trace};

/// Builds the request stream a config describes: a trace file or a
/// synthetic spec, then optional read-to-write instrumentation.
pub fn load_workload(cfg: &RunConfig) -> Result<Trace> {
    let w = &cfg.workload;
    let mut trace = match (&w.trace, &w.synthetic) {
        (Some(p), _) => load_trace(p, w.blob.as_deref())?,
        (None, Some(spec)) => generate(spec)?,
        (None, None) => {
            return Err(SimError::Config("no workload: set workload.trace or a [workload.synthetic] table".into()))
        }
    };
    if let Some(p) = w.write_probability {
        trace.records = instrument_writes(&trace.records, p, cfg.seed);
    }
    Ok(trace)
}

pub fn run(cfg: &RunConfig, trace: &Trace) -> Result<SimOutput> {
    Simulator::new(cfg)?.run(trace)
}

fn axis_changes_workload(axis: &str) -> bool {
    resolve_axis(axis).starts_with("workload.") || axis == "seed"
}

/// One run per value of `axis`, in parallel, results in value order. When
/// `trace` is given it is shared by every member unless the axis reshapes
/// the workload itself.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[String], trace: Option<&Trace>) -> Result<Vec<(String, SimOutput)>> {
    if values.is_empty() {
        return Err(SimError::Config("sweep needs at least one value".into()));
    }
    let members: Vec<(String, RunConfig)> = values
        .iter()
        .map(|v| Ok((v.clone(), cfg.with_overrides(&[format!("{axis}={v}")])?)))
        .collect::<Result<_>>()?;
    let shared = if axis_changes_workload(axis) { None } else { trace };
    members
        .into_par_iter()
        .map(|(v, c)| {
            let owned;
            let t = match shared {
                Some(t) => t,
                None => {
                    owned = load_workload(&c)?;
                    &owned
                }
            };
            let out = Simulator::new(&c)?.with_label(format!("{axis}={v}")).run(t)?;
            Ok((v, out))
        })
        .collect()
}

/// The four incremental configurations (base, +S, +S+C, +S+C+M) on one trace.
pub fn ablate(cfg: &RunConfig, trace: &Trace) -> Result<Vec<(String, SimOutput)>> {
    cfg.ablation_steps()
        .into_par_iter()
        .map(|(name, c)| Ok((name.to_string(), Simulator::new(&c)?.with_label(name).run(trace)?)))
        .collect()
}
