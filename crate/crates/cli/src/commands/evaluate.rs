use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use peakmem_core::metrics::{score_run, summarize, MetricSet};
use peakmem_core::units::HumanBytes;
use peakmem_core::ValidationRecord;
use serde::Deserialize;

use crate::{output, Outcome};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<config_id>.report.json` files written by `estimate`.
    #[arg(long)]
    pub reports: PathBuf,
    /// JSON list of measured runs: config_id, round, device, estimator,
    /// actual_peak, actual_oom.
    #[arg(long)]
    pub actuals: PathBuf,
    /// Only score runs recorded under this estimator label.
    #[arg(long)]
    pub estimator: Option<String>,
    /// Write the metrics here and print a summary instead.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The report fields scoring needs.
#[derive(Debug, Deserialize)]
struct ReportFields {
    predicted_peak: u64,
    oom_predicted: bool,
    device_capacity: u64,
}

fn load_reports(dir: &Path) -> Result<BTreeMap<String, ReportFields>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix(".report.json") {
            out.insert(id.to_string(), output::read_json(&path)?);
        }
    }
    if out.is_empty() {
        bail!("no *.report.json files in {}", dir.display());
    }
    Ok(out)
}

fn summary(m: &MetricSet) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "{} runs, failure probability {:.4}, median error {}, score {}, quadrant {}, avg saved {}\n",
        m.run_count,
        m.failure_probability,
        fmt(m.median_error),
        fmt(m.performance_score),
        m.quadrant.map_or("n/a".to_string(), |q| format!("{q:?}").to_lowercase()),
        m.avg_memory_saved.map_or("n/a".to_string(), |s| {
            let sign = if s < 0.0 { "-" } else { "" };
            format!("{sign}{}", HumanBytes(s.abs() as u64))
        }),
    )
}

pub fn run(args: EvaluateArgs) -> Result<Outcome> {
    let reports = load_reports(&args.reports)?;
    let records: Vec<ValidationRecord> = output::read_json(&args.actuals)?;
    let records: Vec<ValidationRecord> = records
        .into_iter()
        .filter(|r| args.estimator.as_ref().is_none_or(|e| &r.estimator == e))
        .collect();
    for r in &records {
        r.validate().map_err(anyhow::Error::msg)?;
    }

    let key = |r: &ValidationRecord| (r.config_id.clone(), r.device, r.estimator.clone());
    let mut second: BTreeMap<_, &ValidationRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.round == 2) {
        if second.insert(key(r), r).is_some() {
            bail!(
                "{}: more than one second-round run on device {}",
                r.config_id,
                r.device
            );
        }
    }
    let mut runs = Vec::new();
    let mut seen = BTreeMap::new();
    for r in records.iter().filter(|r| r.round == 1) {
        if seen.insert(key(r), ()).is_some() {
            bail!(
                "{}: more than one first-round run on device {}",
                r.config_id,
                r.device
            );
        }
        let Some(report) = reports.get(&r.config_id) else {
            log::warn!("no report for {}, skipping", r.config_id);
            continue;
        };
        let r2 = second.get(&key(r)).copied();
        runs.push(score_run(
            report.predicted_peak,
            report.oom_predicted,
            report.device_capacity,
            r,
            r2,
        ));
    }
    if runs.is_empty() {
        bail!("no first-round runs match the reports");
    }
    let metrics = summarize(runs)?;
    output::emit(args.out.as_deref(), &output::to_json(&metrics)?, || {
        summary(&metrics)
    })?;
    Ok(Outcome::Ok)
}
