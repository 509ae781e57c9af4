//! Peak GPU memory estimation from CPU profiler traces.
//!
//! A trace is parsed into events, grouped into layers, operators and memory
//! blocks, linked by time, rearranged into a request sequence for the target
//! device and replayed through a caching allocator model.

pub mod alloc;
pub mod analysis;
pub mod estimator;
pub mod link;
pub mod metrics;
pub mod orchestrate;
pub mod sequence;
pub mod trace;
pub mod units;

pub use alloc::{AllocError, AllocatorConfig, SimulationResult};
pub use analysis::{analyze, Analysis, BlockRole, LayerMatcher, MemoryBlock};
pub use estimator::{
    estimate, run_pipeline, Estimate, EstimateError, EstimateOptions, EstimateReport,
};
pub use link::{link, LayerMemoryProfile, LinkResult};
pub use metrics::{MetricSet, Quadrant, ValidationRecord};
pub use sequence::{MemoryRequest, RequestKind, RequestSequence};
pub use trace::{parse_trace, ParseOptions, Sidecar, TraceBundle, TraceError, TraceEvent};
