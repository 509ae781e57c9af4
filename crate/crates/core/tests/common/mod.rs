#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use peakmem_core::estimator::{run_pipeline, EstimateOptions};
use peakmem_core::trace::{parse_trace, ParseOptions, Sidecar, TraceBundle};
use peakmem_core::{AllocatorConfig, BlockRole, RequestKind, RequestSequence};
use serde_json::Value;

pub const FIXTURES: [&str; 5] = [
    "tiny_mlp_sgd",
    "tiny_mlp_adam",
    "tiny_mlp_adam_prebwd",
    "tiny_cnn_sgd",
    "mid_mlp_adam",
];

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn manifest(name: &str) -> Value {
    let text =
        std::fs::read_to_string(fixtures_dir().join(format!("{name}.manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn sidecar(name: &str) -> Sidecar {
    Sidecar::load(fixtures_dir().join(format!("{name}.manifest.json"))).unwrap()
}

pub fn bundle(name: &str) -> TraceBundle {
    parse_trace(
        fixtures_dir().join(format!("{name}.json")),
        ParseOptions::default(),
    )
    .unwrap()
    .with_sidecar(sidecar(name))
}

pub fn fixture_config(name: &str) -> AllocatorConfig {
    AllocatorConfig::with_capacity(sidecar(name).device_capacity_bytes.unwrap())
}

pub fn golden_path(name: &str) -> PathBuf {
    fixtures_dir()
        .join("golden")
        .join(format!("{name}.report.json"))
}

pub fn sequence_for(name: &str, iterations: usize) -> RequestSequence {
    let opts = EstimateOptions {
        iterations,
        ..Default::default()
    };
    run_pipeline(&bundle(name), &fixture_config(name), &opts)
        .unwrap()
        .sequence
}

fn alloc_sizes(seq: &RequestSequence, iteration: usize) -> BTreeMap<u64, usize> {
    let mut out = BTreeMap::new();
    for r in seq.iteration_requests(iteration) {
        if r.kind == RequestKind::Alloc {
            *out.entry(r.size).or_insert(0) += 1;
        }
    }
    out
}

fn role_bytes(seq: &RequestSequence, role: BlockRole, iteration: Option<usize>) -> u64 {
    seq.requests
        .iter()
        .filter(|r| r.kind == RequestKind::Alloc && seq.role_of(r.block_id) == Some(role))
        .filter(|r| {
            iteration.is_none() || seq.block_iteration.get(&r.block_id).copied() == iteration
        })
        .map(|r| r.size)
        .sum()
}

/// Structural checks on an orchestrated fixture sequence.
pub fn check_orchestration(name: &str, seq: &RequestSequence) -> Result<(), String> {
    let side = sidecar(name);
    seq.validate().map_err(|e| e.to_string())?;
    for (i, pair) in seq.requests.windows(2).enumerate() {
        if (pair[0].virtual_ts, pair[0].seq_no) > (pair[1].virtual_ts, pair[1].seq_no) {
            return Err(format!("requests {i} and {} out of order", i + 1));
        }
    }
    if seq
        .requests
        .iter()
        .enumerate()
        .any(|(i, r)| r.seq_no != i as u64)
    {
        return Err("seq_no is not the request index".into());
    }

    let model = role_bytes(seq, BlockRole::Model, None);
    let grads = role_bytes(seq, BlockRole::Gradient, Some(0));
    if model != grads || model == 0 {
        return Err(format!(
            "model load {model} B vs first-iteration gradients {grads} B"
        ));
    }
    let params: u64 = side.param_sizes.iter().sum();
    if grads != params {
        return Err(format!("gradients {grads} B vs parameters {params} B"));
    }

    for r in &seq.requests {
        let role = seq.role_of(r.block_id);
        if r.kind == RequestKind::Alloc
            && role == Some(BlockRole::OptimizerState)
            && !side.param_sizes.contains(&r.size)
        {
            return Err(format!(
                "optimizer state of {} B matches no parameter",
                r.size
            ));
        }
        if r.kind == RequestKind::Free
            && role == Some(BlockRole::Gradient)
            && !seq.zero_grad_marks.contains(&r.virtual_ts)
        {
            return Err(format!(
                "gradient {} freed off a zero-grad mark",
                r.block_id
            ));
        }
        if r.kind == RequestKind::Free && role == Some(BlockRole::Model) {
            return Err("model blocks must be permanent".into());
        }
    }

    let states: Vec<u64> = (0..seq.iteration_count())
        .map(|i| role_bytes(seq, BlockRole::OptimizerState, Some(i)))
        .collect();
    match side.optimizer.as_str() {
        "sgd" => {
            if states.iter().any(|&b| b != 0) {
                return Err("SGD sequence has optimizer state".into());
            }
            if seq.iteration_count() >= 2 && alloc_sizes(seq, 0) != alloc_sizes(seq, 1) {
                return Err("SGD iterations 1 and 2 allocate different sizes".into());
            }
        }
        "adam" => {
            if states.first() != Some(&(2 * params)) {
                return Err(format!(
                    "Adam first-iteration state {:?} vs 2 x {params}",
                    states.first()
                ));
            }
            if states.iter().skip(1).any(|&b| b != 0) {
                return Err("Adam state allocated after the first iteration".into());
            }
        }
        other => return Err(format!("unexpected optimizer {other}")),
    }
    Ok(())
}
