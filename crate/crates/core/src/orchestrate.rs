//! Turns the linked blocks of a profiled run into the allocation sequence the
//! target device would see: model load, then a number of training
//! iterations, each with its batch, activations, gradients and optimizer
//! state.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{Analysis, BlockRole, MarkerKind, Span};
use crate::link::LinkResult;
use crate::sequence::{MemoryRequest, RequestKind, RequestSequence};
use crate::trace::Sidecar;
use crate::units::Nanos;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrchestrationError {
    #[error("the trace has no iteration markers or zero iterations were requested")]
    NoIterations,
    #[error("no gradient blocks found in the first iteration")]
    NoGradientBlocks,
    #[error("the sidecar lists no batch tensors")]
    MissingBatchBytes,
}

/// A block placed on the virtual timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedBlock {
    pub block_id: u64,
    pub size: u64,
    pub alloc_ts: Nanos,
    /// `None` keeps the block to the end of the run.
    pub free_ts: Option<Nanos>,
    pub role: BlockRole,
    /// Iteration on the virtual timeline; `None` for model load.
    pub iteration: Option<usize>,
}

fn step_spans(analysis: &Analysis) -> Vec<Span> {
    let mut spans: Vec<Span> = analysis.iteration_steps().map(|m| m.span()).collect();
    spans.sort_by_key(|s| (s.start, s.end));
    spans
}

fn iteration_of(spans: &[Span], ts: Nanos) -> Option<usize> {
    spans.iter().position(|s| s.contains_point(ts))
}

fn marks(analysis: &Analysis, kind: MarkerKind) -> Vec<Span> {
    let mut out: Vec<Span> = analysis
        .markers
        .iter()
        .filter(|m| m.kind == kind)
        .map(|m| m.span())
        .collect();
    out.sort_by_key(|s| (s.start, s.end));
    out
}

/// Activation and gradient blocks of the trace, each assigned to the trace
/// iteration it was allocated in.
///
/// A block retained by a backward operator is a gradient only if it lives
/// until the next zero-grad call (or past the end of the trace). Gradients of
/// intermediate activations die during the backward pass and stay retained
/// blocks with their recorded lifetime. Temporary and unclassified blocks are
/// not part of the sequence.
pub fn classify_blocks(analysis: &Analysis, link: &LinkResult) -> Vec<PlannedBlock> {
    let spans = step_spans(analysis);
    let zero_grads: Vec<Nanos> = marks(analysis, MarkerKind::ZeroGrad)
        .iter()
        .map(|s| s.start)
        .collect();
    let backward = link.gradient_block_ids();
    let mut out = Vec::new();
    for profile in &link.profiles {
        for b in &profile.retained_blocks {
            let Some(it) = iteration_of(&spans, b.alloc_time) else {
                log::debug!("block {} allocated outside every iteration", b.block_id);
                continue;
            };
            let persists = match (b.free_time, next_after(&zero_grads, b.alloc_time)) {
                (None, _) => true,
                (Some(f), Some(z)) => f >= z,
                (Some(_), None) => false,
            };
            let role = if backward.contains(&b.block_id) && persists {
                BlockRole::Gradient
            } else {
                BlockRole::Retained
            };
            out.push(PlannedBlock {
                block_id: b.block_id,
                size: b.size,
                alloc_ts: b.alloc_time,
                free_ts: b.free_time,
                role,
                iteration: Some(it),
            });
        }
    }
    out.sort_by_key(|b| (b.alloc_ts, b.block_id));
    out
}

fn next_after(sorted: &[Nanos], ts: Nanos) -> Option<Nanos> {
    let i = sorted.partition_point(|&z| z <= ts);
    sorted.get(i).copied()
}

/// Blocks allocated inside an optimizer step, still alive when it ends, whose
/// size matches a parameter. These are the optimizer's per-parameter state.
pub fn extract_optimizer_state(analysis: &Analysis, param_sizes: &[u64]) -> Vec<PlannedBlock> {
    let sizes: BTreeSet<u64> = param_sizes.iter().copied().collect();
    let steps = marks(analysis, MarkerKind::OptimizerStep);
    let spans = step_spans(analysis);
    let mut out: Vec<PlannedBlock> = analysis
        .blocks
        .iter()
        .filter(|b| sizes.contains(&b.size))
        .filter(|b| {
            steps.iter().any(|s| {
                s.contains_point(b.alloc_time) && !b.free_time.is_some_and(|f| s.contains_point(f))
            })
        })
        .map(|b| PlannedBlock {
            block_id: b.block_id,
            size: b.size,
            alloc_ts: b.alloc_time,
            free_ts: None,
            role: BlockRole::OptimizerState,
            iteration: iteration_of(&spans, b.alloc_time),
        })
        .collect();
    out.sort_by_key(|b| (b.alloc_ts, b.block_id));
    out
}

/// Weights loaded before training: one permanent block per first-iteration
/// gradient, in reverse order of gradient allocation, at strictly increasing
/// negative timestamps.
pub fn synthesize_model_load(
    first_iteration_gradients: &[PlannedBlock],
    first_id: u64,
) -> Vec<PlannedBlock> {
    let mut grads: Vec<&PlannedBlock> = first_iteration_gradients.iter().collect();
    grads.sort_by_key(|b| (b.alloc_ts, b.block_id));
    let n = grads.len() as Nanos;
    grads
        .iter()
        .rev()
        .enumerate()
        .map(|(i, g)| PlannedBlock {
            block_id: first_id + i as u64,
            size: g.size,
            alloc_ts: i as Nanos - n,
            free_ts: None,
            role: BlockRole::Model,
            iteration: None,
        })
        .collect()
}

/// Batch tensors live for exactly one iteration each.
pub fn synthesize_batch_blocks(
    batch_bytes: &[u64],
    iterations: &[Span],
    first_id: u64,
) -> Vec<PlannedBlock> {
    let mut id = first_id;
    let mut out = Vec::new();
    for (it, span) in iterations.iter().enumerate() {
        for &size in batch_bytes {
            out.push(PlannedBlock {
                block_id: id,
                size,
                alloc_ts: span.start,
                free_ts: Some(span.end),
                role: BlockRole::Batch,
                iteration: Some(it),
            });
            id += 1;
        }
    }
    out
}

/// Gradients are released by the first zero-grad call after they were
/// allocated. Gradients with no later call stay allocated.
pub fn adjust_gradient_lifetimes(blocks: &mut [PlannedBlock], zero_grad_marks: &[Nanos]) {
    let mut marks = zero_grad_marks.to_vec();
    marks.sort_unstable();
    for b in blocks.iter_mut().filter(|b| b.role == BlockRole::Gradient) {
        b.free_ts = next_after(&marks, b.alloc_ts);
    }
}

/// Orders allocations and releases on the virtual timeline. At equal
/// timestamps, releases of older blocks go first, then allocations, then
/// releases of blocks allocated at that same instant.
pub fn emit_requests(blocks: &[PlannedBlock]) -> Vec<MemoryRequest> {
    let mut events: Vec<(Nanos, u8, u64, RequestKind, u64)> = Vec::with_capacity(blocks.len() * 2);
    for b in blocks {
        events.push((b.alloc_ts, 1, b.block_id, RequestKind::Alloc, b.size));
        if let Some(f) = b.free_ts {
            let f = f.max(b.alloc_ts);
            let rank = if f == b.alloc_ts { 2 } else { 0 };
            events.push((f, rank, b.block_id, RequestKind::Free, b.size));
        }
    }
    events.sort_by_key(|e| (e.0, e.1, e.2));
    events
        .into_iter()
        .enumerate()
        .map(|(i, (ts, _, block_id, kind, size))| MemoryRequest {
            seq_no: i as u64,
            kind,
            block_id,
            size,
            virtual_ts: ts,
            stream: 0,
        })
        .collect()
}

/// Builds the request sequence for `iterations` training iterations.
///
/// Profiled iterations are used as recorded. Further iterations repeat the
/// last profiled one, shifted to start where the previous one ended and with
/// fresh block ids.
pub fn build_sequence(
    analysis: &Analysis,
    link: &LinkResult,
    sidecar: &Sidecar,
    iterations: usize,
) -> Result<RequestSequence, OrchestrationError> {
    let trace_spans = step_spans(analysis);
    if trace_spans.is_empty() || iterations == 0 {
        return Err(OrchestrationError::NoIterations);
    }
    if sidecar.batch_bytes.is_empty() {
        return Err(OrchestrationError::MissingBatchBytes);
    }
    let optimizer = extract_optimizer_state(analysis, &sidecar.param_sizes);
    let optimizer_ids: BTreeSet<u64> = optimizer.iter().map(|b| b.block_id).collect();
    let classified: Vec<PlannedBlock> = classify_blocks(analysis, link)
        .into_iter()
        .filter(|b| !optimizer_ids.contains(&b.block_id))
        .collect();

    let mut by_iteration: BTreeMap<usize, Vec<&PlannedBlock>> = BTreeMap::new();
    for b in &classified {
        by_iteration
            .entry(b.iteration.unwrap_or(0))
            .or_default()
            .push(b);
    }
    let zero_grads = marks(analysis, MarkerKind::ZeroGrad);

    let mut next_id = analysis
        .blocks
        .iter()
        .map(|b| b.block_id + 1)
        .max()
        .unwrap_or(0);
    let mut planned: Vec<PlannedBlock> = Vec::new();
    let mut virtual_spans: Vec<Span> = Vec::with_capacity(iterations);
    let mut zero_grad_marks: Vec<Nanos> = Vec::new();
    let last = trace_spans.len() - 1;

    for k in 0..iterations {
        let t = k.min(last);
        let template = trace_spans[t];
        let shift = match virtual_spans.last() {
            Some(prev) if k > last => prev.end - template.start,
            _ => 0,
        };
        let span = Span::new(template.start + shift, template.end + shift);
        virtual_spans.push(span);
        zero_grad_marks.extend(
            zero_grads
                .iter()
                .filter(|z| template.contains_point(z.start))
                .map(|z| z.start + shift),
        );
        for b in by_iteration.get(&t).map(Vec::as_slice).unwrap_or_default() {
            let block_id = if k == t {
                b.block_id
            } else {
                next_id += 1;
                next_id - 1
            };
            planned.push(PlannedBlock {
                block_id,
                alloc_ts: b.alloc_ts + shift,
                free_ts: Some(b.free_ts.map_or(span.end, |f| f + shift)),
                iteration: Some(k),
                ..(*b).clone()
            });
        }
    }
    planned.extend(
        optimizer
            .into_iter()
            .filter(|b| b.iteration.is_some_and(|i| i < iterations)),
    );
    adjust_gradient_lifetimes(&mut planned, &zero_grad_marks);

    let first_grads: Vec<PlannedBlock> = planned
        .iter()
        .filter(|b| b.role == BlockRole::Gradient && b.iteration == Some(0))
        .cloned()
        .collect();
    if first_grads.is_empty() {
        return Err(OrchestrationError::NoGradientBlocks);
    }
    let model = synthesize_model_load(&first_grads, next_id);
    next_id += model.len() as u64;
    let batch = synthesize_batch_blocks(&sidecar.batch_bytes, &virtual_spans, next_id);
    planned.extend(model);
    planned.extend(batch);

    let requests = emit_requests(&planned);
    let mut boundaries: Vec<Nanos> = virtual_spans.iter().map(|s| s.start).collect();
    boundaries.push(virtual_spans.last().map(|s| s.end).unwrap_or_default());
    Ok(RequestSequence {
        requests,
        iteration_boundaries: boundaries,
        phase_tags: planned.iter().map(|b| (b.block_id, b.role)).collect(),
        block_iteration: planned
            .iter()
            .filter_map(|b| b.iteration.map(|i| (b.block_id, i)))
            .collect(),
        zero_grad_marks,
    })
}
