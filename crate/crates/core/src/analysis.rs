//! Structural views over a trace: the layer tree, the top-level operator
//! forest, iteration markers, and memory blocks paired from instant events.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::trace::{filter_category, EventCategory, TraceBundle, TraceEvent};
use crate::units::Nanos;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("python function parent chain through id {0} is cyclic")]
    CyclicParentLink(u64),
    #[error("trace has no profiler-step annotations; iterations cannot be segmented")]
    NoIterationMarkers,
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Span {
    pub start: Nanos,
    pub end: Nanos,
}

impl Span {
    pub fn new(start: Nanos, end: Nanos) -> Self {
        Self { start, end }
    }

    pub fn contains_point(&self, t: Nanos) -> bool {
        self.start <= t && t < self.end
    }

    /// Interval nesting. An interval that starts where this one ends is not
    /// nested, even when it has zero length.
    pub fn contains(&self, inner: &Span) -> bool {
        self.start <= inner.start
            && inner.end <= self.end
            && (inner.start < self.end || inner.start == self.start)
    }
}

/// Decides which python functions are model layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMatcher {
    pub prefixes: Vec<String>,
}

impl Default for LayerMatcher {
    fn default() -> Self {
        Self {
            prefixes: vec!["nn.Module: ".to_string()],
        }
    }
}

impl LayerMatcher {
    pub fn new(prefixes: Vec<String>) -> Self {
        Self { prefixes }
    }

    /// Layer class name for a matching function name, e.g. `Linear` for
    /// `nn.Module: Linear_0`.
    pub fn class_name<'a>(&self, name: &'a str) -> Option<&'a str> {
        let rest = self
            .prefixes
            .iter()
            .find_map(|p| name.strip_prefix(p.as_str()))?;
        match rest.rsplit_once('_') {
            Some((class, idx)) if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => {
                Some(class)
            }
            _ => Some(rest),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerNode {
    /// `None` for the synthetic root.
    pub event_id: Option<usize>,
    pub name: String,
    pub label: String,
    pub start_ts: Nanos,
    pub end_ts: Nanos,
    pub children: Vec<LayerNode>,
    pub is_wrapper: bool,
}

impl LayerNode {
    pub fn span(&self) -> Span {
        Span::new(self.start_ts, self.end_ts)
    }

    /// Pre-order walk including the synthetic root.
    pub fn walk(&self) -> Vec<&LayerNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            stack.extend(node.children.iter().rev());
        }
        out
    }

    pub fn is_root(&self) -> bool {
        self.event_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OperatorNode {
    pub event_id: usize,
    pub name: String,
    pub start_ts: Nanos,
    pub end_ts: Nanos,
    pub sequence_numbers: BTreeSet<i64>,
    pub is_root: bool,
}

impl OperatorNode {
    pub fn span(&self) -> Span {
        Span::new(self.start_ts, self.end_ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    ProfilerStep,
    ZeroGrad,
    OptimizerStep,
}

impl MarkerKind {
    fn classify(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("profilerstep#") || lower == "profiler.step" {
            Some(Self::ProfilerStep)
        } else if lower.contains("zero_grad") {
            Some(Self::ZeroGrad)
        } else if lower.starts_with("optimizer.step") {
            Some(Self::OptimizerStep)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotationMarker {
    pub kind: MarkerKind,
    pub start_ts: Nanos,
    pub end_ts: Nanos,
    pub iteration_index: usize,
}

impl AnnotationMarker {
    pub fn span(&self) -> Span {
        Span::new(self.start_ts, self.end_ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Unclassified,
    Model,
    Batch,
    Gradient,
    OptimizerState,
    Temporary,
    Retained,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryBlock {
    pub block_id: u64,
    pub addr: u64,
    pub size: u64,
    pub alloc_time: Nanos,
    pub free_time: Option<Nanos>,
    pub permanent: bool,
    pub role: BlockRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupingWarning {
    /// A release at an address with no open block; the event is dropped.
    UnmatchedFree { event_id: usize, addr: u64 },
    /// Two allocations at one address with no release in between. The open
    /// block is closed at the second event and a new block is opened.
    DoubleAllocation { event_id: usize, addr: u64 },
    /// Release byte count differs from the allocation it closes.
    SizeMismatch {
        event_id: usize,
        addr: u64,
        allocated: u64,
        released: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupedBlocks {
    pub blocks: Vec<MemoryBlock>,
    pub warnings: Vec<GroupingWarning>,
}

/// Arranges python functions into a tree of layers. Non-layer frames are
/// collapsed and their layer descendants re-parented to the nearest layer
/// ancestor, or to the synthetic root.
pub fn build_layer_tree(
    functions: &[TraceEvent],
    matcher: &LayerMatcher,
) -> Result<LayerNode, AnalysisError> {
    let by_python_id: HashMap<u64, usize> = functions
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.python_id.map(|id| (id, i)))
        .collect();
    let parent_of = |i: usize| -> Option<usize> {
        functions[i]
            .parent_id
            .and_then(|p| by_python_id.get(&p).copied())
    };
    let is_layer: Vec<bool> = functions
        .iter()
        .map(|f| matcher.class_name(&f.name).is_some())
        .collect();

    // anchor[i]: nearest layer at or above i; Some(None) means the root.
    let mut anchor: Vec<Option<Option<usize>>> = vec![None; functions.len()];
    for start in 0..functions.len() {
        let mut path = Vec::new();
        let mut on_path = BTreeSet::new();
        let mut cur = Some(start);
        let resolved = loop {
            let Some(i) = cur else { break None };
            if let Some(a) = anchor[i] {
                break a;
            }
            if is_layer[i] {
                break Some(i);
            }
            if !on_path.insert(i) {
                return Err(AnalysisError::CyclicParentLink(
                    functions[i].python_id.unwrap_or_default(),
                ));
            }
            path.push(i);
            cur = parent_of(i);
        };
        for i in path {
            anchor[i] = Some(resolved);
        }
        if is_layer[start] {
            anchor[start] = Some(Some(start));
        }
    }

    // Cycles that pass only through layers are caught here.
    let layer_parent =
        |i: usize| -> Option<usize> { parent_of(i).and_then(|p| anchor[p].flatten()) };
    let mut children: HashMap<Option<usize>, Vec<usize>> = HashMap::new();
    for i in (0..functions.len()).filter(|&i| is_layer[i]) {
        let mut seen = BTreeSet::new();
        let mut cur = Some(i);
        while let Some(c) = cur {
            if !seen.insert(c) {
                return Err(AnalysisError::CyclicParentLink(
                    functions[c].python_id.unwrap_or_default(),
                ));
            }
            cur = layer_parent(c);
        }
        children.entry(layer_parent(i)).or_default().push(i);
    }
    for list in children.values_mut() {
        list.sort_by_key(|&i| (functions[i].start_ts, functions[i].event_id));
    }

    fn build(
        idx: usize,
        functions: &[TraceEvent],
        children: &HashMap<Option<usize>, Vec<usize>>,
        matcher: &LayerMatcher,
    ) -> LayerNode {
        let f = &functions[idx];
        let kids: Vec<LayerNode> = children
            .get(&Some(idx))
            .map(|c| {
                c.iter()
                    .map(|&k| build(k, functions, children, matcher))
                    .collect()
            })
            .unwrap_or_default();
        LayerNode {
            event_id: Some(f.event_id),
            name: matcher.class_name(&f.name).unwrap_or(&f.name).to_string(),
            label: f.name.clone(),
            start_ts: f.start_ts,
            end_ts: f.end_ts(),
            is_wrapper: !kids.is_empty(),
            children: kids,
        }
    }

    let top: Vec<LayerNode> = children
        .get(&None)
        .map(|c| {
            c.iter()
                .map(|&k| build(k, functions, &children, matcher))
                .collect()
        })
        .unwrap_or_default();
    let start_ts = top.iter().map(|n| n.start_ts).min().unwrap_or(0);
    let end_ts = top.iter().map(|n| n.end_ts).max().unwrap_or(0);
    Ok(LayerNode {
        event_id: None,
        name: "<root>".to_string(),
        label: String::new(),
        start_ts,
        end_ts,
        is_wrapper: false,
        children: top,
    })
}

/// Top-level operators: those not nested inside another operator's interval.
/// Each root collects the sequence numbers of every operator it absorbs.
/// Identical intervals nest in event order.
pub fn build_operator_roots(ops: &[TraceEvent]) -> Vec<OperatorNode> {
    let mut order: Vec<&TraceEvent> = ops.iter().collect();
    order.sort_by_key(|e| (e.start_ts, std::cmp::Reverse(e.end_ts()), e.event_id));
    let mut roots: Vec<OperatorNode> = Vec::new();
    for op in order {
        let span = Span::new(op.start_ts, op.end_ts());
        let seq = op.sequence_number.filter(|s| *s >= 0);
        match roots.last_mut() {
            Some(root) if root.span().contains(&span) => root.sequence_numbers.extend(seq),
            _ => roots.push(OperatorNode {
                event_id: op.event_id,
                name: op.name.clone(),
                start_ts: op.start_ts,
                end_ts: op.end_ts(),
                sequence_numbers: seq.into_iter().collect(),
                is_root: true,
            }),
        }
    }
    roots
}

/// Typed iteration markers, sorted by start time. Zero-grad and optimizer-step
/// markers are attributed to the latest profiler step starting at or before
/// them (iteration 0 if none).
pub fn extract_markers(annotations: &[TraceEvent]) -> Result<Vec<AnnotationMarker>, AnalysisError> {
    let mut typed: Vec<(&TraceEvent, MarkerKind)> = annotations
        .iter()
        .filter_map(|e| MarkerKind::classify(&e.name).map(|k| (e, k)))
        .collect();
    typed.sort_by_key(|(e, _)| (e.start_ts, e.event_id));
    let step_starts: Vec<Nanos> = typed
        .iter()
        .filter(|(_, k)| *k == MarkerKind::ProfilerStep)
        .map(|(e, _)| e.start_ts)
        .collect();
    if step_starts.is_empty() {
        return Err(AnalysisError::NoIterationMarkers);
    }
    let mut step_rank = 0;
    Ok(typed
        .into_iter()
        .map(|(e, kind)| {
            let iteration_index = if kind == MarkerKind::ProfilerStep {
                step_rank += 1;
                step_rank - 1
            } else {
                step_starts
                    .partition_point(|&s| s <= e.start_ts)
                    .saturating_sub(1)
            };
            AnnotationMarker {
                kind,
                start_ts: e.start_ts,
                end_ts: e.end_ts(),
                iteration_index,
            }
        })
        .collect())
}

/// Pairs memory instant events into blocks by address recurrence: the first
/// event at an address opens a block and the next event at that address
/// closes it. Blocks still open at the end are permanent. Output is sorted
/// by allocation time.
pub fn group_memory_events(instants: &[TraceEvent]) -> GroupedBlocks {
    let mut open: HashMap<u64, usize> = HashMap::new();
    let mut out = GroupedBlocks::default();
    for ev in instants {
        let (Some(addr), Some(bytes)) = (ev.addr, ev.bytes) else {
            continue;
        };
        if let Some(idx) = open.remove(&addr) {
            let block = &mut out.blocks[idx];
            block.free_time = Some(ev.start_ts);
            block.permanent = false;
            if bytes > 0 {
                out.warnings.push(GroupingWarning::DoubleAllocation {
                    event_id: ev.event_id,
                    addr,
                });
            } else if bytes.unsigned_abs() != block.size {
                out.warnings.push(GroupingWarning::SizeMismatch {
                    event_id: ev.event_id,
                    addr,
                    allocated: block.size,
                    released: bytes.unsigned_abs(),
                });
            }
            if bytes < 0 {
                continue;
            }
        } else if bytes < 0 {
            log::warn!(
                "dropping release at {addr:#x} with no prior allocation (event {})",
                ev.event_id
            );
            out.warnings.push(GroupingWarning::UnmatchedFree {
                event_id: ev.event_id,
                addr,
            });
            continue;
        }
        open.insert(addr, out.blocks.len());
        out.blocks.push(MemoryBlock {
            block_id: out.blocks.len() as u64,
            addr,
            size: bytes as u64,
            alloc_time: ev.start_ts,
            free_time: None,
            permanent: true,
            role: BlockRole::Unclassified,
        });
    }
    out.blocks.sort_by_key(|b| (b.alloc_time, b.block_id));
    out
}

/// Everything the link and orchestration phases need from one trace.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub layers: LayerNode,
    pub operator_roots: Vec<OperatorNode>,
    pub markers: Vec<AnnotationMarker>,
    pub blocks: Vec<MemoryBlock>,
    pub warnings: Vec<GroupingWarning>,
}

impl Analysis {
    pub fn iteration_steps(&self) -> impl Iterator<Item = &AnnotationMarker> {
        self.markers
            .iter()
            .filter(|m| m.kind == MarkerKind::ProfilerStep)
    }

    pub fn iteration_count(&self) -> usize {
        self.iteration_steps().count()
    }
}

pub fn analyze(bundle: &TraceBundle, matcher: &LayerMatcher) -> Result<Analysis, AnalysisError> {
    let functions = filter_category(bundle, EventCategory::PythonFunction);
    let ops = filter_category(bundle, EventCategory::CpuOp);
    let annotations = filter_category(bundle, EventCategory::UserAnnotation);
    let instants = filter_category(bundle, EventCategory::CpuInstantEvent);
    let layers = build_layer_tree(&functions, matcher)?;
    let markers = extract_markers(&annotations)?;
    let operator_roots = build_operator_roots(&ops);
    let grouped = group_memory_events(&instants);
    Ok(Analysis {
        layers,
        operator_roots,
        markers,
        blocks: grouped.blocks,
        warnings: grouped.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn func(
        id: usize,
        name: &str,
        start: Nanos,
        end: Nanos,
        py: u64,
        parent: Option<u64>,
    ) -> TraceEvent {
        TraceEvent {
            event_id: id,
            category: EventCategory::PythonFunction,
            name: name.into(),
            start_ts: start,
            duration: end - start,
            python_id: Some(py),
            parent_id: parent,
            sequence_number: None,
            addr: None,
            bytes: None,
            total_allocated: None,
            total_reserved: None,
            raw_category: None,
        }
    }

    fn op(id: usize, name: &str, start: Nanos, end: Nanos, seq: Option<i64>) -> TraceEvent {
        TraceEvent {
            category: EventCategory::CpuOp,
            sequence_number: seq,
            python_id: None,
            ..func(id, name, start, end, 0, None)
        }
    }

    fn annot(id: usize, name: &str, start: Nanos, end: Nanos) -> TraceEvent {
        TraceEvent {
            category: EventCategory::UserAnnotation,
            python_id: None,
            ..func(id, name, start, end, 0, None)
        }
    }

    fn mem(id: usize, ts: Nanos, addr: u64, bytes: i64) -> TraceEvent {
        TraceEvent {
            category: EventCategory::CpuInstantEvent,
            addr: Some(addr),
            bytes: Some(bytes),
            python_id: None,
            ..func(id, "[memory]", ts, ts, 0, None)
        }
    }

    #[test]
    fn layer_tree_two_children() {
        let fs = vec![
            func(0, "nn.Module: Net_0", 0, 100, 1, None),
            func(1, "nn.Module: Linear_0", 10, 20, 2, Some(1)),
            func(2, "nn.Module: ReLU_0", 30, 40, 3, Some(1)),
        ];
        let root = build_layer_tree(&fs, &LayerMatcher::default()).unwrap();
        assert_eq!(root.children.len(), 1);
        let net = &root.children[0];
        assert!(net.is_wrapper);
        let names: Vec<_> = net.children.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["Linear", "ReLU"]);
        assert!(net
            .children
            .iter()
            .all(|c| !c.is_wrapper && c.children.is_empty()));
    }

    #[test]
    fn non_layer_frames_collapse() {
        // A -> B (plain python frame) -> C
        let fs = vec![
            func(0, "nn.Module: A_0", 0, 100, 1, None),
            func(1, "torch/nn/functional.py(12): helper", 5, 50, 2, Some(1)),
            func(2, "nn.Module: C_0", 10, 20, 3, Some(2)),
        ];
        let root = build_layer_tree(&fs, &LayerMatcher::default()).unwrap();
        let a = &root.children[0];
        assert_eq!(a.name, "A");
        assert_eq!(a.children.len(), 1);
        assert_eq!(a.children[0].name, "C");
        assert_eq!(root.walk().len(), 3);
    }

    #[test]
    fn missing_parent_attaches_to_root() {
        let fs = vec![func(0, "nn.Module: A_0", 0, 10, 1, Some(99))];
        let root = build_layer_tree(&fs, &LayerMatcher::default()).unwrap();
        assert_eq!(root.children.len(), 1);
        assert_eq!((root.start_ts, root.end_ts), (0, 10));
    }

    #[test]
    fn cyclic_parents_rejected() {
        let fs = vec![
            func(0, "f", 0, 10, 1, Some(2)),
            func(1, "g", 0, 10, 2, Some(1)),
        ];
        assert_eq!(
            build_layer_tree(&fs, &LayerMatcher::default()),
            Err(AnalysisError::CyclicParentLink(1))
        );
        let layers = vec![
            func(0, "nn.Module: A_0", 0, 10, 1, Some(2)),
            func(1, "nn.Module: B_0", 0, 10, 2, Some(1)),
        ];
        assert!(matches!(
            build_layer_tree(&layers, &LayerMatcher::default()),
            Err(AnalysisError::CyclicParentLink(_))
        ));
    }

    #[test]
    fn class_names() {
        let m = LayerMatcher::default();
        assert_eq!(m.class_name("nn.Module: Linear_12"), Some("Linear"));
        assert_eq!(m.class_name("nn.Module: My_Block"), Some("My_Block"));
        assert_eq!(m.class_name("nn.Module: Conv2d"), Some("Conv2d"));
        assert_eq!(m.class_name("aten::mm"), None);
    }

    #[test]
    fn operator_roots_by_containment() {
        let ops = vec![
            op(0, "A", 0, 10, None),
            op(1, "B", 2, 5, Some(7)),
            op(2, "C", 20, 30, None),
        ];
        let roots = build_operator_roots(&ops);
        let names: Vec<_> = roots.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["A", "C"]);
        assert!(roots[0].sequence_numbers.contains(&7));
        assert!(roots[1].sequence_numbers.is_empty());
    }

    #[test]
    fn adjacent_ops_are_not_nested() {
        let roots = build_operator_roots(&[op(0, "A", 0, 10, None), op(1, "B", 10, 20, None)]);
        assert_eq!(roots.len(), 2);
        let roots = build_operator_roots(&[op(0, "A", 0, 10, None), op(1, "Z", 10, 10, None)]);
        assert_eq!(roots.len(), 2);
    }

    #[test]
    fn identical_intervals_nest_in_event_order() {
        let roots = build_operator_roots(&[
            op(3, "outer", 0, 10, Some(1)),
            op(4, "inner", 0, 10, Some(2)),
        ]);
        assert_eq!(roots.len(), 1);
        assert_eq!(roots[0].name, "outer");
        assert_eq!(roots[0].sequence_numbers, BTreeSet::from([1, 2]));
    }

    #[test]
    fn markers_attributed_to_iterations() {
        let ev = vec![
            annot(0, "ProfilerStep#0", 0, 100),
            annot(1, "Optimizer.zero_grad#SGD.zero_grad", 5, 10),
            annot(2, "Optimizer.step#SGD.step", 80, 90),
            annot(3, "ProfilerStep#1", 100, 200),
            annot(4, "something else", 120, 130),
        ];
        let m = extract_markers(&ev).unwrap();
        assert_eq!(m.len(), 4);
        let steps: Vec<_> = m
            .iter()
            .filter(|m| m.kind == MarkerKind::ProfilerStep)
            .collect();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[1].iteration_index, 1);
        assert_eq!(m[1].kind, MarkerKind::ZeroGrad);
        assert_eq!(m[1].iteration_index, 0);
        assert_eq!(m[2].kind, MarkerKind::OptimizerStep);
        assert_eq!(m[2].iteration_index, 0);
    }

    #[test]
    fn no_zero_grad_is_fine_but_no_steps_is_not() {
        let m = extract_markers(&[annot(0, "ProfilerStep#0", 0, 10)]).unwrap();
        assert!(m.iter().all(|m| m.kind != MarkerKind::ZeroGrad));
        assert_eq!(
            extract_markers(&[annot(0, "Optimizer.step#SGD.step", 0, 10)]),
            Err(AnalysisError::NoIterationMarkers)
        );
    }

    #[test]
    fn grouping_alloc_then_free() {
        let g = group_memory_events(&[mem(0, 1, 0x100, 512), mem(1, 5, 0x100, -512)]);
        assert_eq!(g.blocks.len(), 1);
        let b = &g.blocks[0];
        assert_eq!(
            (b.addr, b.size, b.alloc_time, b.free_time),
            (0x100, 512, 1, Some(5))
        );
        assert!(!b.permanent);
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn grouping_unmatched_alloc_is_permanent() {
        let g = group_memory_events(&[mem(0, 1, 0x100, 512)]);
        assert_eq!(g.blocks.len(), 1);
        assert!(g.blocks[0].permanent);
        assert_eq!(g.blocks[0].free_time, None);
    }

    #[test]
    fn grouping_address_reuse() {
        let g = group_memory_events(&[
            mem(0, 1, 0x100, 64),
            mem(1, 2, 0x100, -64),
            mem(2, 3, 0x100, 64),
            mem(3, 9, 0x100, -64),
        ]);
        let lifetimes: Vec<_> = g
            .blocks
            .iter()
            .map(|b| (b.alloc_time, b.free_time))
            .collect();
        assert_eq!(lifetimes, [(1, Some(2)), (3, Some(9))]);
    }

    #[test]
    fn grouping_anomalies() {
        let g = group_memory_events(&[
            mem(0, 1, 0x200, -64),
            mem(1, 2, 0x100, 64),
            mem(2, 3, 0x100, 128),
            mem(3, 4, 0x100, -100),
        ]);
        assert_eq!(g.blocks.len(), 2);
        assert_eq!(g.blocks[0].free_time, Some(3));
        assert_eq!(g.blocks[1].free_time, Some(4));
        assert_eq!(
            g.warnings,
            vec![
                GroupingWarning::UnmatchedFree {
                    event_id: 0,
                    addr: 0x200
                },
                GroupingWarning::DoubleAllocation {
                    event_id: 2,
                    addr: 0x100
                },
                GroupingWarning::SizeMismatch {
                    event_id: 3,
                    addr: 0x100,
                    allocated: 128,
                    released: 100
                },
            ]
        );
    }
}
