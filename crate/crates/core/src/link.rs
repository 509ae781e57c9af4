//! Links layers to the operators they run and operators to the memory blocks
//! those operators leave behind. Correlation is purely by timestamps.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::analysis::{Analysis, BlockRole, LayerNode, MemoryBlock, OperatorNode, Span};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerMemoryProfile {
    pub layer_event_id: Option<usize>,
    pub layer_name: String,
    pub layer_span: Span,
    pub forward_ops: Vec<OperatorNode>,
    pub backward_ops: Vec<OperatorNode>,
    pub retained_blocks: Vec<MemoryBlock>,
    pub temporary_blocks: Vec<MemoryBlock>,
}

impl LayerMemoryProfile {
    fn new(layer: &LayerNode) -> Self {
        Self {
            layer_event_id: layer.event_id,
            layer_name: layer.name.clone(),
            layer_span: layer.span(),
            forward_ops: Vec::new(),
            backward_ops: Vec::new(),
            retained_blocks: Vec::new(),
            temporary_blocks: Vec::new(),
        }
    }

    /// Retained blocks allocated while one of this layer's backward operators
    /// was running.
    pub fn gradient_blocks(&self) -> impl Iterator<Item = &MemoryBlock> {
        self.retained_blocks.iter().filter(|b| {
            self.backward_ops
                .iter()
                .any(|op| op.span().contains_point(b.alloc_time))
        })
    }

    pub fn retained_bytes(&self) -> u64 {
        self.retained_blocks.iter().map(|b| b.size).sum()
    }

    pub fn temporary_bytes(&self) -> u64 {
        self.temporary_blocks.iter().map(|b| b.size).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkResult {
    pub profiles: Vec<LayerMemoryProfile>,
    /// Blocks allocated outside every owned operator.
    pub unclassified: Vec<MemoryBlock>,
}

impl LinkResult {
    /// Ids of retained blocks allocated by backward operators.
    pub fn gradient_block_ids(&self) -> BTreeSet<u64> {
        self.profiles
            .iter()
            .flat_map(|p| p.gradient_blocks().map(|b| b.block_id))
            .collect()
    }
}

/// Gives each non-wrapper layer the root operators that lie entirely inside
/// its interval. When layers nest, the innermost one owns the operator.
pub fn link_layers_to_ops(layers: &LayerNode, roots: &[OperatorNode]) -> Vec<LayerMemoryProfile> {
    let owners: Vec<&LayerNode> = layers
        .walk()
        .into_iter()
        .filter(|l| !l.is_root() && !l.is_wrapper)
        .collect();
    let mut profiles: Vec<LayerMemoryProfile> =
        owners.iter().map(|l| LayerMemoryProfile::new(l)).collect();

    let mut sorted_roots: Vec<usize> = (0..roots.len()).collect();
    sorted_roots.sort_by_key(|&i| (roots[i].start_ts, roots[i].event_id));
    let starts: Vec<_> = sorted_roots.iter().map(|&i| roots[i].start_ts).collect();

    // Outer layers first so nested ones overwrite them.
    let mut visit: Vec<usize> = (0..owners.len()).collect();
    visit.sort_by_key(|&i| (owners[i].start_ts, std::cmp::Reverse(owners[i].end_ts)));
    let mut owner_of: HashMap<usize, usize> = HashMap::new();
    for li in visit {
        let span = owners[li].span();
        let from = starts.partition_point(|&s| s < span.start);
        for &ri in &sorted_roots[from..] {
            if roots[ri].start_ts >= span.end && roots[ri].start_ts != span.start {
                break;
            }
            if span.contains(&roots[ri].span()) {
                owner_of.insert(ri, li);
            }
        }
    }
    for &ri in &sorted_roots {
        if let Some(&li) = owner_of.get(&ri) {
            profiles[li].forward_ops.push(roots[ri].clone());
        }
    }
    profiles
}

/// Adds every other operator that shares a sequence number with a layer's
/// forward operators as that layer's backward operators.
pub fn attach_backward_ops(
    mut profiles: Vec<LayerMemoryProfile>,
    all_ops: &[OperatorNode],
) -> Vec<LayerMemoryProfile> {
    let mut by_seq: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, op) in all_ops.iter().enumerate() {
        for &s in &op.sequence_numbers {
            by_seq.entry(s).or_default().push(i);
        }
    }
    for profile in &mut profiles {
        let forward_ids: BTreeSet<usize> = profile.forward_ops.iter().map(|o| o.event_id).collect();
        let seqs: BTreeSet<i64> = profile
            .forward_ops
            .iter()
            .flat_map(|o| o.sequence_numbers.iter().copied())
            .collect();
        let mut picked: BTreeSet<usize> = BTreeSet::new();
        for s in seqs {
            for &i in by_seq.get(&s).map(Vec::as_slice).unwrap_or_default() {
                if !forward_ids.contains(&all_ops[i].event_id) {
                    picked.insert(i);
                }
            }
        }
        let mut backward: Vec<OperatorNode> =
            picked.into_iter().map(|i| all_ops[i].clone()).collect();
        backward.sort_by_key(|o| (o.start_ts, o.event_id));
        profile.backward_ops = backward;
    }
    profiles
}

/// Attaches each block to the layer owning the operator during which it was
/// allocated. A block also released inside that same operator is temporary;
/// otherwise it is retained. Blocks allocated outside all owned operators are
/// returned as unclassified.
pub fn attach_blocks(mut profiles: Vec<LayerMemoryProfile>, blocks: &[MemoryBlock]) -> LinkResult {
    // One owner per operator: the first profile that claims it.
    let mut owned: BTreeMap<(i64, usize), (Span, usize)> = BTreeMap::new();
    for (pi, p) in profiles.iter().enumerate() {
        for op in p.forward_ops.iter().chain(&p.backward_ops) {
            owned
                .entry((op.start_ts, op.event_id))
                .or_insert((op.span(), pi));
        }
    }
    let owned: Vec<(Span, usize)> = owned.into_values().collect();
    let starts: Vec<_> = owned.iter().map(|(s, _)| s.start).collect();

    let mut unclassified = Vec::new();
    for block in blocks {
        // Root operators never nest, so only the latest one starting at or
        // before the allocation can contain it.
        let idx = starts.partition_point(|&s| s <= block.alloc_time);
        let hit = idx
            .checked_sub(1)
            .map(|i| &owned[i])
            .filter(|(span, _)| span.contains_point(block.alloc_time));
        let mut block = block.clone();
        match hit {
            Some((span, pi)) => {
                let temporary = block.free_time.is_some_and(|f| span.contains_point(f));
                if temporary {
                    block.role = BlockRole::Temporary;
                    profiles[*pi].temporary_blocks.push(block);
                } else {
                    block.role = BlockRole::Retained;
                    profiles[*pi].retained_blocks.push(block);
                }
            }
            None => {
                block.role = BlockRole::Unclassified;
                unclassified.push(block);
            }
        }
    }
    LinkResult {
        profiles,
        unclassified,
    }
}

pub fn link(analysis: &Analysis) -> LinkResult {
    let profiles = link_layers_to_ops(&analysis.layers, &analysis.operator_roots);
    let profiles = attach_backward_ops(profiles, &analysis.operator_roots);
    attach_blocks(profiles, &analysis.blocks)
}
