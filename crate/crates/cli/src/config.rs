use std::path::Path;

use anyhow::{bail, Context, Result};
use peakmem_core::units::{parse_size, MIB};
use peakmem_core::AllocatorConfig;
use serde::Deserialize;

use crate::AllocatorArgs;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SizeValue {
    Bytes(u64),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    device_capacity: Option<SizeValue>,
    max_split_size_mb: Option<u64>,
    iterations: Option<usize>,
    include_initial_memory: Option<bool>,
}

/// Defaults read from the config file.
#[derive(Debug, Default, Clone)]
pub struct Config {
    pub device_capacity: Option<u64>,
    pub max_split_size_mb: Option<u64>,
    pub iterations: Option<usize>,
    pub include_initial_memory: Option<bool>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let raw: RawConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let device_capacity = match raw.device_capacity {
            None => None,
            Some(SizeValue::Bytes(b)) => Some(b),
            Some(SizeValue::Text(s)) => Some(parse_size(&s)?),
        };
        Ok(Self {
            device_capacity,
            max_split_size_mb: raw.max_split_size_mb,
            iterations: raw.iterations,
            include_initial_memory: raw.include_initial_memory,
        })
    }

    /// Allocator settings from flags, then this config, then `fallback_capacity`.
    pub fn allocator(
        &self,
        args: &AllocatorArgs,
        fallback_capacity: Option<u64>,
    ) -> Result<Option<AllocatorConfig>> {
        let Some(capacity) = args
            .device_capacity
            .or(self.device_capacity)
            .or(fallback_capacity)
        else {
            return Ok(None);
        };
        if capacity == 0 {
            bail!("device capacity must be positive");
        }
        let split = match args.max_split_size_mb.or(self.max_split_size_mb) {
            Some(0) => bail!("--max-split-size-mb must be positive"),
            Some(mb) => Some(
                mb.checked_mul(MIB)
                    .context("--max-split-size-mb is too large")?,
            ),
            None => None,
        };
        let cfg = AllocatorConfig::with_capacity(capacity).with_max_split_size(split);
        cfg.validate()?;
        Ok(Some(cfg))
    }
}
