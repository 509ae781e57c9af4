//! Shared helpers for the benchmarks.

use std::path::PathBuf;

use peakmem_core::trace::{parse_trace, ParseOptions, Sidecar, TraceBundle};
use peakmem_core::AllocatorConfig;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn trace_path(name: &str) -> PathBuf {
    fixtures_dir().join(format!("{name}.json"))
}

/// A committed fixture with its sidecar attached.
pub fn load_fixture(name: &str) -> (TraceBundle, AllocatorConfig) {
    let sidecar = Sidecar::load(fixtures_dir().join(format!("{name}.manifest.json")))
        .expect("fixture sidecar");
    let capacity = sidecar.device_capacity_bytes.unwrap_or(u64::MAX);
    let bundle = parse_trace(trace_path(name), ParseOptions::default())
        .expect("fixture trace")
        .with_sidecar(sidecar);
    (bundle, AllocatorConfig::with_capacity(capacity))
}
