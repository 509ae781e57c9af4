use std::path::Path;

use anyhow::{Context, Result};
use peakmem_core::units::parse_size;
use serde::Serialize;

pub fn parse_size_arg(s: &str) -> Result<u64, String> {
    parse_size(s).map_err(|e| e.to_string())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    Ok(out)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// With a path, writes `json` there and prints `summary`. Without one,
/// prints the JSON alone so stdout stays machine-readable.
pub fn emit(path: Option<&Path>, json: &str, summary: impl FnOnce() -> String) -> Result<()> {
    match path {
        Some(p) => {
            write_file(p, json)?;
            print!("{}", summary());
            println!("wrote {}", p.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
