//! End-to-end estimate for one traced training task.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alloc::{self, AllocatorConfig, OomEvent, ReplayError, SimulationResult};
use crate::analysis::{analyze, Analysis, AnalysisError, BlockRole, LayerMatcher};
use crate::link::{link, LinkResult};
use crate::metrics::predict_oom;
use crate::orchestrate::{build_sequence, OrchestrationError};
use crate::sequence::RequestSequence;
use crate::trace::{Sidecar, TraceBundle};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("the trace has no sidecar metadata")]
    MissingSidecar,
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub iterations: usize,
    /// Count the memory already in use on the device (framework context and
    /// the like) against the capacity.
    pub include_initial_memory: bool,
    pub stamp: Option<String>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            iterations: 2,
            include_initial_memory: false,
            stamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EstimateReport {
    /// Peak reserved bytes of the replay, excluding initial memory.
    pub predicted_peak: u64,
    pub reserved_peak: u64,
    pub allocated_peak: u64,
    pub initial_memory: u64,
    pub device_capacity: u64,
    /// Initial memory plus the predicted peak.
    pub runnable_memory: u64,
    pub oom_predicted: bool,
    pub oom_during_replay: Option<OomEvent>,
    /// Bytes allocated per block role over the whole sequence.
    pub phase_breakdown: BTreeMap<BlockRole, u64>,
    pub sequence_length: usize,
    pub iterations: usize,
    pub include_initial_memory: bool,
    pub max_split_size: Option<u64>,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stamp: Option<String>,
}

impl EstimateReport {
    /// Canonical pretty JSON with a trailing newline, as written to report
    /// files.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }
}

/// Every intermediate product of an estimate.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub report: EstimateReport,
    pub analysis: Analysis,
    pub link: LinkResult,
    pub sequence: RequestSequence,
    pub simulation: SimulationResult,
}

pub fn layer_matcher(sidecar: Option<&Sidecar>) -> LayerMatcher {
    match sidecar.and_then(|s| s.layer_prefixes.clone()) {
        Some(prefixes) if !prefixes.is_empty() => LayerMatcher::new(prefixes),
        _ => LayerMatcher::default(),
    }
}

#[derive(Serialize)]
struct DigestInput<'a> {
    allocator: &'a AllocatorConfig,
    iterations: usize,
    include_initial_memory: bool,
    sidecar: &'a Sidecar,
    event_count: usize,
}

fn digest(
    cfg: &AllocatorConfig,
    opts: &EstimateOptions,
    sidecar: &Sidecar,
    events: usize,
) -> String {
    let input = DigestInput {
        allocator: cfg,
        iterations: opts.iterations,
        include_initial_memory: opts.include_initial_memory,
        sidecar,
        event_count: events,
    };
    let bytes = serde_json::to_vec(&input).expect("digest input serializes");
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(&bytes) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Runs analysis, linking, orchestration and replay for `bundle`.
///
/// With `include_initial_memory`, the replay only gets the capacity left over
/// after the initial memory.
pub fn run_pipeline(
    bundle: &TraceBundle,
    cfg: &AllocatorConfig,
    opts: &EstimateOptions,
) -> Result<Estimate, EstimateError> {
    let sidecar = bundle
        .metadata
        .as_ref()
        .ok_or(EstimateError::MissingSidecar)?;
    let analysis = analyze(bundle, &layer_matcher(Some(sidecar)))?;
    let linked = link(&analysis);
    let sequence = build_sequence(&analysis, &linked, sidecar, opts.iterations)?;

    let initial = sidecar.initial_memory_bytes;
    let mut replay_cfg = cfg.clone();
    if opts.include_initial_memory {
        replay_cfg.device_capacity = cfg.device_capacity.saturating_sub(initial).max(1);
    }
    let simulation = alloc::replay(&sequence.requests, &replay_cfg)?;

    let peak = simulation.peak_reserved;
    let counted = if opts.include_initial_memory {
        peak.saturating_add(initial)
    } else {
        peak
    };
    let report = EstimateReport {
        predicted_peak: peak,
        reserved_peak: simulation.peak_reserved,
        allocated_peak: simulation.peak_allocated,
        initial_memory: initial,
        device_capacity: cfg.device_capacity,
        runnable_memory: peak.saturating_add(initial),
        oom_predicted: simulation.is_oom() || predict_oom(counted, cfg.device_capacity),
        oom_during_replay: simulation.oom.clone(),
        phase_breakdown: sequence.bytes_by_role(),
        sequence_length: sequence.requests.len(),
        iterations: opts.iterations,
        include_initial_memory: opts.include_initial_memory,
        max_split_size: cfg.max_split_size,
        config_digest: digest(cfg, opts, sidecar, bundle.events.len()),
        stamp: opts.stamp.clone(),
    };
    Ok(Estimate {
        report,
        analysis,
        link: linked,
        sequence,
        simulation,
    })
}

pub fn estimate(
    bundle: &TraceBundle,
    cfg: &AllocatorConfig,
    opts: &EstimateOptions,
) -> Result<EstimateReport, EstimateError> {
    run_pipeline(bundle, cfg, opts).map(|e| e.report)
}
