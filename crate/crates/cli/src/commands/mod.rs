pub mod analyze;
pub mod estimate;
pub mod evaluate;
pub mod replay;
pub mod selftest;

use std::path::Path;

use anyhow::{Context, Result};
use peakmem_core::trace::{parse_trace, ParseOptions, Sidecar, TraceBundle};

/// Reads a trace and, when given, its sidecar.
pub fn load_bundle(trace: &Path, sidecar: Option<&Path>, strict: bool) -> Result<TraceBundle> {
    let bundle = parse_trace(trace, ParseOptions { strict }).map_err(anyhow::Error::from)?;
    Ok(match sidecar {
        Some(p) => bundle
            .with_sidecar(Sidecar::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => bundle,
    })
}

pub fn role_name(role: peakmem_core::BlockRole) -> String {
    serde_json::to_value(role)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
