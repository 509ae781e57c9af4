use std::collections::BTreeSet;

use peakmem_core::analysis::{analyze, BlockRole, LayerMatcher, Span};
use peakmem_core::estimator::{run_pipeline, EstimateError, EstimateOptions};
use peakmem_core::link::link;
use peakmem_core::orchestrate::{
    adjust_gradient_lifetimes, build_sequence, extract_optimizer_state, synthesize_batch_blocks,
    synthesize_model_load, OrchestrationError, PlannedBlock,
};
use peakmem_core::trace::{parse_trace_str, ParseOptions, Sidecar, TraceBundle};
use peakmem_core::units::Nanos;
use peakmem_core::{AllocatorConfig, RequestKind};
use serde_json::json;

mod common;

fn planned(id: u64, size: u64, alloc: Nanos, role: BlockRole) -> PlannedBlock {
    PlannedBlock {
        block_id: id,
        size,
        alloc_ts: alloc,
        free_ts: None,
        role,
        iteration: Some(0),
    }
}

fn sidecar(param_sizes: &[u64], batch_bytes: &[u64]) -> Sidecar {
    Sidecar::from_json(&json!({"param_sizes": param_sizes, "batch_bytes": batch_bytes}).to_string())
        .unwrap()
}

fn span_event(
    cat: &str,
    name: &str,
    ts: u64,
    dur: u64,
    args: serde_json::Value,
) -> serde_json::Value {
    json!({"ph": "X", "cat": cat, "name": name, "ts": ts, "dur": dur, "args": args})
}

fn mem_event(ts: u64, addr: u64, bytes: i64) -> serde_json::Value {
    json!({"ph": "i", "cat": "cpu_instant_event", "name": "[memory]", "ts": ts,
           "args": {"Addr": addr, "Bytes": bytes, "Total Allocated": 0, "Total Reserved": 0}})
}

fn trace(events: Vec<serde_json::Value>) -> TraceBundle {
    parse_trace_str(
        &json!({"traceEvents": events}).to_string(),
        ParseOptions::default(),
    )
    .unwrap()
}

#[test]
fn fixture_sequences_hold_invariants() {
    for name in common::FIXTURES {
        for iterations in 1..=4 {
            let seq = common::sequence_for(name, iterations);
            assert_eq!(seq.iteration_count(), iterations, "{name}");
            common::check_orchestration(name, &seq)
                .unwrap_or_else(|e| panic!("{name}, {iterations} iterations: {e}"));
        }
    }
}

#[test]
fn single_iteration_request() {
    let seq = common::sequence_for("tiny_mlp_sgd", 1);
    assert!(seq.block_iteration.values().all(|&i| i == 0));
    assert_eq!(seq.iteration_boundaries.len(), 2);
}

#[test]
fn extra_iterations_clone_the_last_profiled_one() {
    let seq = common::sequence_for("tiny_mlp_adam", 3);
    let b = &seq.iteration_boundaries;
    assert_eq!(b[2] - b[1], b[1] - b[0]);
    assert_eq!(b[3] - b[2], b[1] - b[0]);
    let ids: Vec<u64> = seq
        .requests
        .iter()
        .filter(|r| r.kind == RequestKind::Alloc)
        .map(|r| r.block_id)
        .collect();
    assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), ids.len());
    // Each clone carries the template's zero-grad call.
    assert_eq!(seq.zero_grad_marks.len(), 3);
}

#[test]
fn single_iteration_sgd_trace_is_cloned() {
    let full = common::bundle("tiny_mlp_sgd");
    let a = analyze(&full, &LayerMatcher::default()).unwrap();
    let first = a.iteration_steps().next().unwrap().span();
    let mut cut = full.clone();
    cut.events.retain(|e| e.start_ts < first.end);
    let est = run_pipeline(
        &cut,
        &common::fixture_config("tiny_mlp_sgd"),
        &EstimateOptions::default(),
    )
    .unwrap();
    assert_eq!(est.analysis.iteration_count(), 1);
    assert_eq!(est.sequence.iteration_count(), 2);
    common::check_orchestration("tiny_mlp_sgd", &est.sequence).unwrap();
    assert!(!est
        .sequence
        .phase_tags
        .values()
        .any(|&r| r == BlockRole::OptimizerState));
}

#[test]
fn model_load_order_is_reversed() {
    // Backward allocates g3, g2, g1 in that order.
    let grads = [
        planned(3, 300, 10, BlockRole::Gradient),
        planned(2, 200, 20, BlockRole::Gradient),
        planned(1, 100, 30, BlockRole::Gradient),
    ];
    let model = synthesize_model_load(&grads, 100);
    assert_eq!(
        model.iter().map(|b| b.size).collect::<Vec<_>>(),
        [100, 200, 300]
    );
    assert!(model.windows(2).all(|w| w[0].alloc_ts < w[1].alloc_ts));
    assert!(model.iter().all(|b| b.alloc_ts < 0 && b.free_ts.is_none()));

    let one = synthesize_model_load(&[planned(1, 512, 5, BlockRole::Gradient)], 9);
    assert_eq!(one.len(), 1);
    assert_eq!((one[0].size, one[0].free_ts), (512, None));
}

#[test]
fn batch_blocks() {
    let spans = [Span::new(0, 100), Span::new(100, 180)];
    let b = synthesize_batch_blocks(&[1000], &spans, 0);
    assert_eq!(b.len(), 2);
    assert_eq!((b[1].alloc_ts, b[1].free_ts), (100, Some(180)));
    let b = synthesize_batch_blocks(&[600, 400], &spans[..1], 0);
    assert!(b.iter().all(|x| x.alloc_ts == 0 && x.free_ts == Some(100)));
    assert!(synthesize_batch_blocks(&[600], &[], 0).is_empty());
}

#[test]
fn gradient_lifetimes() {
    let mut g = [planned(1, 8, 50, BlockRole::Gradient)];
    adjust_gradient_lifetimes(&mut g, &[120]);
    assert_eq!(g[0].free_ts, Some(120));
    adjust_gradient_lifetimes(&mut g, &[40, 120]);
    assert_eq!(g[0].free_ts, Some(120));
    adjust_gradient_lifetimes(&mut g, &[]);
    assert_eq!(g[0].free_ts, None);
}

#[test]
fn optimizer_state_keeps_parameter_sized_blocks() {
    let b = trace(vec![
        span_event("user_annotation", "ProfilerStep#0", 0, 1000, json!({})),
        span_event(
            "user_annotation",
            "Optimizer.step#Adam.step",
            500,
            400,
            json!({}),
        ),
        mem_event(600, 0x1000, 400),
        mem_event(610, 0x2000, 400),
        mem_event(620, 0x3000, 512),
        // A parameter-sized scratch buffer released inside the step.
        mem_event(630, 0x4000, 1600),
        mem_event(640, 0x4000, -1600),
    ]);
    let a = analyze(&b, &LayerMatcher::default()).unwrap();
    let kept = extract_optimizer_state(&a, &[400, 1600]);
    assert_eq!(kept.iter().map(|k| k.size).collect::<Vec<_>>(), [400, 400]);
    assert!(kept
        .iter()
        .all(|k| k.free_ts.is_none() && k.role == BlockRole::OptimizerState));

    let sgd = analyze(&common::bundle("tiny_mlp_sgd"), &LayerMatcher::default()).unwrap();
    assert!(extract_optimizer_state(&sgd, &common::sidecar("tiny_mlp_sgd").param_sizes).is_empty());
}

#[test]
fn orchestration_errors() {
    let no_steps = trace(vec![span_event("cpu_op", "aten::mm", 0, 10, json!({}))]);
    let a = analyze(&no_steps, &LayerMatcher::default());
    // Either the analysis or the orchestration must refuse a step-less trace.
    if let Ok(a) = a {
        let l = link(&a);
        assert_eq!(
            build_sequence(&a, &l, &sidecar(&[8], &[8]), 2),
            Err(OrchestrationError::NoIterations)
        );
    }

    let forward_only = trace(vec![
        span_event("user_annotation", "ProfilerStep#0", 0, 1000, json!({})),
        span_event(
            "python_function",
            "nn.Module: Linear_0",
            10,
            90,
            json!({"Python id": 1}),
        ),
        span_event(
            "cpu_op",
            "aten::linear",
            20,
            70,
            json!({"Sequence number": 5}),
        ),
        mem_event(30, 0x1000, 4096),
    ]);
    let a = analyze(&forward_only, &LayerMatcher::default()).unwrap();
    let l = link(&a);
    assert_eq!(
        build_sequence(&a, &l, &sidecar(&[4096], &[64]), 2),
        Err(OrchestrationError::NoGradientBlocks)
    );
    assert_eq!(
        build_sequence(&a, &l, &sidecar(&[4096], &[]), 2),
        Err(OrchestrationError::MissingBatchBytes)
    );
    assert_eq!(
        build_sequence(&a, &l, &sidecar(&[4096], &[64]), 0),
        Err(OrchestrationError::NoIterations)
    );

    let err = run_pipeline(
        &forward_only.with_sidecar(sidecar(&[4096], &[64])),
        &AllocatorConfig::default(),
        &EstimateOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        EstimateError::Orchestration(OrchestrationError::NoGradientBlocks)
    ));
}
