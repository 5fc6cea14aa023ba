//! The engine against a flat reference memory on random mixed traces, for
//! every step of the ablation ladder and both compressor backends.

mod common;

use cmx_core::compress::BackendKind;
use cmx_core::config::RunConfig;
use cmx_core::engine::ExhaustionPolicy;
use cmx_core::sim::Simulator;
use common::{first_mismatch, mixed_trace, small_config, Reference};
use proptest::prelude::*;

fn ladder(step: usize, backend: BackendKind) -> RunConfig {
    let mut base = small_config(1 << 20);
    base.compression.backend = backend;
    base.telemetry.audit_interval = 97;
    base.telemetry.victim_audit = true;
    base.ablation_steps().swap_remove(step).1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn readback_matches_reference(seed in any::<u64>(), step in 0usize..4, oracle: bool, write_p in 0.0f64..0.9) {
        let backend = if oracle { BackendKind::SizeOracle } else { BackendKind::Lz77 };
        let cfg = ladder(step, backend);
        let trace = mixed_trace(seed, 2500, 600, 2400, write_p, 0.8);
        let mut sim = Simulator::new(&cfg).unwrap();
        let out = sim.run(&trace).unwrap();
        prop_assert!(out.report.traffic.conserved);
        let reference = Reference::replay(&trace, &cfg);
        prop_assert_eq!(first_mismatch(&sim, &trace, &reference), None);

        let engine = sim.engine().unwrap();
        prop_assert!(engine.shadow_bytes() <= engine.layout().promoted.size);
        let victims = engine.activity().audit_log().unwrap();
        for v in victims.iter().filter(|v| !v.via_random) {
            prop_assert!(!v.referenced_at_fetch && v.probed_absent, "unsound victim {:?}", v);
        }
    }
}

#[test]
fn read_only_traces_never_recompress_with_shadowing() {
    for step in 1..4 {
        let cfg = ladder(step, BackendKind::Lz77);
        let trace = mixed_trace(5, 20_000, 1500, 6000, 0.0, 0.0);
        let out = Simulator::new(&cfg).unwrap().run(&trace).unwrap();
        let d = out.report.demotion.unwrap();
        assert!(d.victims > 0, "step {step} never demoted");
        assert_eq!(d.compressions, 0);
        assert_eq!(out.report.traffic.by_category["demotion-write"], 0);
    }
}

#[test]
fn skip_policy_survives_a_full_device() {
    let mut cfg = small_config(1 << 20);
    cfg.layout.compressed_size = 1 << 22;
    cfg.layout.sub_region_size = 1 << 22;
    cfg.layout.advertised_capacity = Some(1 << 26);
    cfg.ibex.exhaustion = ExhaustionPolicy::Skip;
    // 4MB of C-chunks cannot hold 3000 incompressible pages.
    let mut trace = mixed_trace(9, 6000, 3000, 3000, 0.3, 1.0);
    for r in &mut trace.records {
        if matches!(r.annot, cmx_core::workload::Annotation::Ratio(_) | cmx_core::workload::Annotation::Zero) {
            r.annot = cmx_core::workload::Annotation::Ratio(1.0);
        }
    }
    let mut sim = Simulator::new(&cfg).unwrap();
    let out = sim.run(&trace).unwrap();
    assert!(out.report.engine.unwrap().skipped_pages > 0);
    assert!(out.report.traffic.conserved);

    cfg.ibex.exhaustion = ExhaustionPolicy::Abort;
    let err = Simulator::new(&cfg).unwrap().run(&trace).unwrap_err();
    assert!(matches!(err, cmx_core::SimError::CapacityExhausted { .. }), "{err}");
}
