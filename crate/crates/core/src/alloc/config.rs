use serde::{Deserialize, Serialize};

use super::AllocError;
use crate::units::MIB;

/// Caching allocator constants. Defaults match the CUDA caching allocator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    /// Largest request served from a small segment.
    pub k_small_size: u64,
    pub k_small_buffer: u64,
    /// Largest request served from a fixed large segment.
    pub k_min_large_alloc: u64,
    pub k_large_buffer: u64,
    /// Granularity of segments for requests above `k_min_large_alloc`.
    pub k_round_large: u64,
    pub alignment: u64,
    /// Cached blocks larger than this are never split. `None` is unbounded.
    pub max_split_size: Option<u64>,
    pub device_capacity: u64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            k_small_size: MIB,
            k_small_buffer: 2 * MIB,
            k_min_large_alloc: 10 * MIB,
            k_large_buffer: 20 * MIB,
            k_round_large: 2 * MIB,
            alignment: 512,
            max_split_size: None,
            device_capacity: u64::MAX,
        }
    }
}

impl AllocatorConfig {
    pub fn with_capacity(device_capacity: u64) -> Self {
        Self {
            device_capacity,
            ..Self::default()
        }
    }

    pub fn with_max_split_size(mut self, max_split_size: Option<u64>) -> Self {
        self.max_split_size = max_split_size;
        self
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        let consts = [
            self.k_small_size,
            self.k_small_buffer,
            self.k_min_large_alloc,
            self.k_large_buffer,
            self.k_round_large,
            self.alignment,
            self.device_capacity,
        ];
        if consts.contains(&0) || self.max_split_size == Some(0) {
            return Err(AllocError::InvalidConfig("all constants must be positive"));
        }
        if !self.alignment.is_power_of_two() {
            return Err(AllocError::InvalidConfig(
                "alignment must be a power of two",
            ));
        }
        Ok(())
    }

    /// Smallest multiple of the alignment that is at least `size`.
    pub fn round_request(&self, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        size.div_ceil(self.alignment)
            .checked_mul(self.alignment)
            .ok_or(AllocError::ZeroSize)
    }

    /// Size of the segment requested from the device for a rounded request.
    pub fn segment_size_for(&self, size: u64) -> u64 {
        if size <= self.k_small_size {
            self.k_small_buffer
        } else if size <= self.k_min_large_alloc {
            self.k_large_buffer
        } else {
            self.k_round_large * size.div_ceil(self.k_round_large)
        }
    }

    pub(crate) fn is_oversize(&self, block_size: u64) -> bool {
        self.max_split_size.is_some_and(|m| block_size > m)
    }
}

/// Rounds a request up to a multiple of 512 bytes.
pub fn round_request(size: u64) -> Result<u64, AllocError> {
    AllocatorConfig::default().round_request(size)
}

pub fn segment_size_for(size: u64, cfg: &AllocatorConfig) -> u64 {
    cfg.segment_size_for(size)
}
