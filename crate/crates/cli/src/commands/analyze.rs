use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use peakmem_core::analysis::{AnnotationMarker, GroupingWarning, LayerNode};
use peakmem_core::estimator::layer_matcher;
use peakmem_core::units::HumanBytes;
use peakmem_core::{analyze, link, Analysis, BlockRole, LinkResult};
use serde::Serialize;

use crate::output;
use crate::Outcome;

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Chrome-trace JSON exported by the profiler.
    #[arg(long)]
    pub trace: PathBuf,
    /// Capture metadata; only its layer prefixes are used here.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Reject events outside the consumed categories.
    #[arg(long)]
    pub strict: bool,
    /// Write the structure here and print a summary instead.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub forward_ops: usize,
    pub backward_ops: usize,
    pub retained_bytes: u64,
    pub temporary_bytes: u64,
    pub gradient_bytes: u64,
}

/// Condensed view of what analysis and linking found.
#[derive(Debug, Serialize)]
pub struct Structure<'a> {
    pub iterations: usize,
    pub operator_roots: usize,
    pub memory_blocks: usize,
    pub unclassified_blocks: usize,
    pub blocks_by_role: BTreeMap<BlockRole, usize>,
    pub markers: &'a [AnnotationMarker],
    pub layers: &'a LayerNode,
    pub profiles: Vec<LayerSummary>,
    pub warnings: &'a [GroupingWarning],
}

pub fn structure<'a>(analysis: &'a Analysis, linked: &LinkResult) -> Structure<'a> {
    let gradients = linked.gradient_block_ids();
    let mut blocks_by_role = BTreeMap::new();
    for b in &analysis.blocks {
        *blocks_by_role.entry(b.role).or_insert(0) += 1;
    }
    let profiles = linked
        .profiles
        .iter()
        .map(|p| LayerSummary {
            name: p.layer_name.clone(),
            forward_ops: p.forward_ops.len(),
            backward_ops: p.backward_ops.len(),
            retained_bytes: p.retained_bytes(),
            temporary_bytes: p.temporary_bytes(),
            gradient_bytes: p
                .retained_blocks
                .iter()
                .filter(|b| gradients.contains(&b.block_id))
                .map(|b| b.size)
                .sum(),
        })
        .collect();
    Structure {
        iterations: analysis.iteration_count(),
        operator_roots: analysis.operator_roots.len(),
        memory_blocks: analysis.blocks.len(),
        unclassified_blocks: linked.unclassified.len(),
        blocks_by_role,
        markers: &analysis.markers,
        layers: &analysis.layers,
        profiles,
        warnings: &analysis.warnings,
    }
}

fn summary(s: &Structure) -> String {
    let mut out = format!(
        "{} iterations, {} operator roots, {} memory blocks ({} unclassified), {} warnings\n",
        s.iterations,
        s.operator_roots,
        s.memory_blocks,
        s.unclassified_blocks,
        s.warnings.len()
    );
    for p in &s.profiles {
        out.push_str(&format!(
            "  {:<24} fwd {:>3}  bwd {:>3}  retained {:>12}  temporary {:>12}\n",
            p.name,
            p.forward_ops,
            p.backward_ops,
            HumanBytes(p.retained_bytes).to_string(),
            HumanBytes(p.temporary_bytes).to_string()
        ));
    }
    out
}

pub fn run(args: AnalyzeArgs) -> Result<Outcome> {
    let bundle = super::load_bundle(&args.trace, args.sidecar.as_deref(), args.strict)?;
    let analysis = analyze(&bundle, &layer_matcher(bundle.metadata.as_ref()))?;
    let linked = link(&analysis);
    let s = structure(&analysis, &linked);
    output::emit(args.output.as_deref(), &output::to_json(&s)?, || {
        summary(&s)
    })?;
    Ok(Outcome::Ok)
}
