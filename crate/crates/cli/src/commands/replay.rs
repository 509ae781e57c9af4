use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use peakmem_core::alloc::{reference, replay, OomEvent, TimelinePoint};
use peakmem_core::sequence::from_replay_json;
use peakmem_core::units::HumanBytes;
use peakmem_core::SimulationResult;
use serde::Serialize;

use crate::config::Config;
use crate::{output, AllocatorArgs, Outcome};

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Request list: `[{"seq_no", "kind", "block_id", "size", "stream"}, ...]`.
    #[arg(long)]
    pub sequence: PathBuf,
    /// Device memory; unbounded when neither given nor configured.
    #[command(flatten)]
    pub allocator: AllocatorArgs,
    /// Include the reserved/allocated value after every request.
    #[arg(long)]
    pub emit_timeline: bool,
    /// Use the straightforward reference allocator instead.
    #[arg(long, conflicts_with = "cross_check")]
    pub reference: bool,
    /// Replay through both allocators and exit 1 if they disagree.
    #[arg(long)]
    pub cross_check: bool,
    /// Write the result here and print a summary instead.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ReplayOutput<'a> {
    requests: usize,
    peak_reserved: u64,
    peak_allocated: u64,
    final_reserved: u64,
    final_allocated: u64,
    oom: Option<&'a OomEvent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timeline: Option<&'a [TimelinePoint]>,
}

pub fn run(args: ReplayArgs, cfg: &Config) -> Result<Outcome> {
    let text = std::fs::read_to_string(&args.sequence)
        .with_context(|| format!("reading {}", args.sequence.display()))?;
    let requests =
        from_replay_json(&text).with_context(|| format!("parsing {}", args.sequence.display()))?;
    let alloc_cfg = cfg
        .allocator(&args.allocator, Some(u64::MAX))?
        .expect("a fallback capacity was given");

    let result: SimulationResult = if args.reference {
        reference::replay(&requests, &alloc_cfg)?
    } else {
        replay(&requests, &alloc_cfg)?
    };
    let mut outcome = Outcome::Ok;
    if args.cross_check {
        let other = reference::replay(&requests, &alloc_cfg)?;
        if other != result {
            eprintln!("allocator model and reference disagree");
            outcome = Outcome::Flagged;
        } else {
            log::info!("reference replay agrees");
        }
    }
    let out = ReplayOutput {
        requests: requests.len(),
        peak_reserved: result.peak_reserved,
        peak_allocated: result.peak_allocated,
        final_reserved: result.final_reserved,
        final_allocated: result.final_allocated,
        oom: result.oom.as_ref(),
        timeline: args.emit_timeline.then_some(result.timeline.as_slice()),
    };
    output::emit(args.output.as_deref(), &output::to_json(&out)?, || {
        let mut s = format!(
            "{} requests, peak reserved {}, peak allocated {}\n",
            out.requests,
            HumanBytes(out.peak_reserved),
            HumanBytes(out.peak_allocated)
        );
        if let Some(oom) = out.oom {
            s.push_str(&format!("out of memory at request {}\n", oom.seq_no));
        }
        s
    })?;
    Ok(outcome)
}
