use std::time::{Duration, Instant};

use peakmem_core::alloc::reference;
use peakmem_core::estimator::{estimate, run_pipeline, EstimateError, EstimateOptions};
use peakmem_core::trace::{parse_trace_str, ParseOptions};
use peakmem_core::units::MIB;
use peakmem_core::{AllocatorConfig, BlockRole};

mod common;

/// Report text for a fixture under default settings. Set `UPDATE_GOLDEN=1`
/// to rewrite the stored reports.
fn report_text(name: &str) -> String {
    let report = estimate(
        &common::bundle(name),
        &common::fixture_config(name),
        &EstimateOptions::default(),
    )
    .unwrap();
    report.to_json()
}

#[test]
fn golden_reports() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for name in common::FIXTURES {
        let start = Instant::now();
        let got = report_text(name);
        assert!(
            start.elapsed() < Duration::from_secs(5),
            "{name} took {:?}",
            start.elapsed()
        );
        let path = common::golden_path(name);
        if update {
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        let want =
            std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn reports_are_deterministic() {
    for name in common::FIXTURES {
        assert_eq!(report_text(name), report_text(name), "{name}");
    }
}

#[test]
fn reports_are_consistent() {
    for name in common::FIXTURES {
        let cfg = common::fixture_config(name);
        let est = run_pipeline(&common::bundle(name), &cfg, &EstimateOptions::default()).unwrap();
        let r = &est.report;
        assert_eq!(r.predicted_peak, r.reserved_peak);
        assert!(r.allocated_peak <= r.reserved_peak);
        assert_eq!(r.runnable_memory, r.predicted_peak + r.initial_memory);
        assert_eq!(r.sequence_length, est.sequence.requests.len());
        assert!(!r.oom_predicted, "{name}");
        let alloc_bytes: u64 = est
            .sequence
            .requests
            .iter()
            .filter(|q| q.kind == peakmem_core::RequestKind::Alloc)
            .map(|q| q.size)
            .sum();
        assert_eq!(r.phase_breakdown.values().sum::<u64>(), alloc_bytes);
        assert_eq!(
            r.phase_breakdown[&BlockRole::Model],
            r.phase_breakdown[&BlockRole::Gradient] / 2
        );
        // Both allocators see the same sequence.
        assert_eq!(
            est.simulation,
            reference::replay(&est.sequence.requests, &cfg).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn report_json_parses_back() {
    let text = report_text("tiny_mlp_adam");
    assert!(text.ends_with("}\n"));
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let report = estimate(
        &common::bundle("tiny_mlp_adam"),
        &common::fixture_config("tiny_mlp_adam"),
        &EstimateOptions::default(),
    )
    .unwrap();
    assert_eq!(value, serde_json::to_value(&report).unwrap());
    assert!(value.get("stamp").is_none());
}

#[test]
fn empty_iteration_trace_is_rejected() {
    let text = r#"{"traceEvents": [
        {"ph": "X", "cat": "cpu_op", "name": "aten::empty", "ts": 0, "dur": 5, "args": {}}
    ]}"#;
    let b = parse_trace_str(text, ParseOptions::default())
        .unwrap()
        .with_sidecar(common::sidecar("tiny_mlp_sgd"));
    let err = estimate(&b, &AllocatorConfig::default(), &EstimateOptions::default()).unwrap_err();
    assert!(err.to_string().contains("iteration"), "{err}");
}

#[test]
fn sidecar_is_required() {
    let mut b = common::bundle("tiny_mlp_sgd");
    b.metadata = None;
    let err = estimate(&b, &AllocatorConfig::default(), &EstimateOptions::default()).unwrap_err();
    assert!(matches!(err, EstimateError::MissingSidecar));
}

#[test]
fn initial_memory_counts_against_capacity() {
    let name = "tiny_mlp_adam";
    let b = common::bundle(name);
    let base = estimate(&b, &AllocatorConfig::default(), &EstimateOptions::default()).unwrap();
    let initial = base.initial_memory;
    assert!(initial > 0);

    // Room for the peak alone, but not for the peak plus initial memory.
    let cfg = AllocatorConfig::with_capacity(base.predicted_peak + initial - 1);
    let without = estimate(&b, &cfg, &EstimateOptions::default()).unwrap();
    assert!(!without.oom_predicted);
    let opts = EstimateOptions {
        include_initial_memory: true,
        ..Default::default()
    };
    let with = estimate(&b, &cfg, &opts).unwrap();
    assert!(with.oom_predicted);
    assert_ne!(with.config_digest, without.config_digest);

    let roomy = AllocatorConfig::with_capacity(base.predicted_peak + initial);
    assert!(!estimate(&b, &roomy, &opts).unwrap().oom_predicted);
}

#[test]
fn small_device_runs_out_of_memory() {
    let name = "mid_mlp_adam";
    let cfg = AllocatorConfig::with_capacity(32 * MIB);
    let r = estimate(&common::bundle(name), &cfg, &EstimateOptions::default()).unwrap();
    assert!(r.oom_predicted);
    let oom = r.oom_during_replay.unwrap();
    assert!(oom.reserved + oom.segment > 32 * MIB);
    assert!(r.predicted_peak <= 32 * MIB);
}

#[test]
fn split_limit_never_lowers_the_reserved_peak_below_allocated() {
    let name = "mid_mlp_adam";
    for split in [1, 2, 4, 8, 16] {
        let cfg = common::fixture_config(name).with_max_split_size(Some(split * MIB));
        let r = estimate(&common::bundle(name), &cfg, &EstimateOptions::default()).unwrap();
        assert_eq!(r.max_split_size, Some(split * MIB));
        assert!(r.allocated_peak <= r.reserved_peak);
    }
}

#[test]
fn more_iterations_never_shrink_the_peak() {
    for name in common::FIXTURES {
        let mut last = 0;
        for iterations in 1..=4 {
            let opts = EstimateOptions {
                iterations,
                ..Default::default()
            };
            let r = estimate(&common::bundle(name), &common::fixture_config(name), &opts).unwrap();
            assert!(r.predicted_peak >= last, "{name}: {iterations}");
            last = r.predicted_peak;
        }
    }
}

#[test]
fn stamp_is_reported_only_when_given() {
    let opts = EstimateOptions {
        stamp: Some("run-7".into()),
        ..Default::default()
    };
    let r = estimate(
        &common::bundle("tiny_mlp_sgd"),
        &common::fixture_config("tiny_mlp_sgd"),
        &opts,
    )
    .unwrap();
    assert!(r.to_json().contains("\"stamp\": \"run-7\""));
}
