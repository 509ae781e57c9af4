//! Caching allocator simulation.

mod config;
pub mod random;
pub mod reference;
mod sim;

use serde::Serialize;
use thiserror::Error;

pub use config::{round_request, segment_size_for, AllocatorConfig};
pub use sim::{replay, CachingAllocator};

use crate::sequence::SequenceError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("zero-sized request")]
    ZeroSize,
    #[error("out of memory: needed a {segment}-byte segment for a {requested}-byte request with {reserved} of {capacity} bytes reserved")]
    OutOfMemory {
        requested: u64,
        segment: u64,
        reserved: u64,
        capacity: u64,
    },
    #[error("handle {0} is already allocated")]
    DuplicateHandle(u64),
    #[error("handle {0} was never allocated")]
    UnknownHandle(u64),
    #[error("handle {0} was already freed")]
    DoubleFree(u64),
    #[error("invalid allocator config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    MalformedSequence(#[from] SequenceError),
    #[error(transparent)]
    Allocator(AllocError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TimelinePoint {
    pub seq_no: u64,
    pub reserved: u64,
    pub allocated: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OomEvent {
    pub seq_no: u64,
    pub block_id: u64,
    pub requested: u64,
    pub segment: u64,
    pub reserved: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimulationResult {
    pub peak_reserved: u64,
    pub peak_allocated: u64,
    pub final_reserved: u64,
    pub final_allocated: u64,
    pub timeline: Vec<TimelinePoint>,
    /// First request that could not be served. Replay stops there.
    pub oom: Option<OomEvent>,
}

impl SimulationResult {
    pub fn is_oom(&self) -> bool {
        self.oom.is_some()
    }
}

/// Observable layout of one segment, for comparing allocators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentSnapshot {
    pub base: u64,
    pub size: u64,
    pub stream: u32,
    pub blocks: Vec<BlockSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSnapshot {
    pub offset: u64,
    pub size: u64,
    pub handle: Option<u64>,
}
