use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use peakmem_core::estimator::{run_pipeline, EstimateOptions, EstimateReport};
use peakmem_core::sequence::to_replay_json;
use peakmem_core::units::HumanBytes;

use crate::config::Config;
use crate::{output, AllocatorArgs, Outcome};

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Chrome-trace JSON exported by the profiler.
    #[arg(long)]
    pub trace: PathBuf,
    /// Capture metadata: parameter sizes, batch sizes, device facts.
    #[arg(long)]
    pub sidecar: PathBuf,
    #[command(flatten)]
    pub allocator: AllocatorArgs,
    /// Training iterations to simulate.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Count the memory already in use on the device against the capacity.
    #[arg(long)]
    pub include_initial_memory: bool,
    /// Write the report here and print a summary instead.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Exit with status 1 when the task is predicted to run out of memory.
    #[arg(long)]
    pub fail_on_oom: bool,
    /// Reject events outside the consumed categories.
    #[arg(long)]
    pub strict: bool,
    /// Also write the analyzed trace structure to this file.
    #[arg(long, value_name = "PATH")]
    pub dump_structure: Option<PathBuf>,
    /// Also write the orchestrated request sequence to this file, in the
    /// format `replay` reads.
    #[arg(long, value_name = "PATH")]
    pub dump_sequence: Option<PathBuf>,
    /// Also write the reserved/allocated timeline of the replay to this file.
    #[arg(long, value_name = "PATH")]
    pub emit_timeline: Option<PathBuf>,
    /// Free-form label copied into the report.
    #[arg(long)]
    pub stamp: Option<String>,
}

fn summary(r: &EstimateReport) -> String {
    let verdict = if r.oom_predicted {
        "out of memory"
    } else {
        "fits"
    };
    let mut out = String::new();
    out.push_str(&format!(
        "predicted peak    {} ({} B)\n",
        HumanBytes(r.predicted_peak),
        r.predicted_peak
    ));
    out.push_str(&format!(
        "allocated peak    {}\n",
        HumanBytes(r.allocated_peak)
    ));
    out.push_str(&format!(
        "initial memory    {}\n",
        HumanBytes(r.initial_memory)
    ));
    out.push_str(&format!(
        "device capacity   {}\n",
        HumanBytes(r.device_capacity)
    ));
    for (role, bytes) in &r.phase_breakdown {
        out.push_str(&format!(
            "  {:<16}{}\n",
            super::role_name(*role),
            HumanBytes(*bytes)
        ));
    }
    if let Some(oom) = &r.oom_during_replay {
        out.push_str(&format!(
            "replay failed at request {} needing a {} segment with {} reserved\n",
            oom.seq_no,
            HumanBytes(oom.segment),
            HumanBytes(oom.reserved)
        ));
    }
    out.push_str(&format!("verdict           {verdict}\n"));
    out
}

pub fn run(args: EstimateArgs, cfg: &Config) -> Result<Outcome> {
    let bundle = super::load_bundle(&args.trace, Some(&args.sidecar), args.strict)?;
    let side_capacity = bundle
        .metadata
        .as_ref()
        .and_then(|s| s.device_capacity_bytes);
    let Some(alloc_cfg) = cfg.allocator(&args.allocator, side_capacity)? else {
        bail!("no device capacity: pass --device-capacity or record device_capacity_bytes in the sidecar");
    };
    let opts = EstimateOptions {
        iterations: args.iterations.or(cfg.iterations).unwrap_or(2),
        include_initial_memory: args.include_initial_memory
            || cfg.include_initial_memory.unwrap_or(false),
        stamp: args.stamp.clone(),
    };
    if opts.iterations == 0 {
        bail!("--iterations must be at least 1");
    }
    let est = run_pipeline(&bundle, &alloc_cfg, &opts)?;

    if let Some(p) = &args.dump_structure {
        let s = super::analyze::structure(&est.analysis, &est.link);
        output::write_file(p, &output::to_json(&s)?)?;
    }
    if let Some(p) = &args.dump_sequence {
        output::write_file(p, &to_replay_json(&est.sequence.requests))?;
    }
    if let Some(p) = &args.emit_timeline {
        output::write_file(p, &output::to_json(&est.simulation.timeline)?)?;
    }
    let report = &est.report;
    output::emit(args.output.as_deref(), &report.to_json(), || {
        summary(report)
    })?;

    Ok(if args.fail_on_oom && report.oom_predicted {
        Outcome::Flagged
    } else {
        Outcome::Ok
    })
}
