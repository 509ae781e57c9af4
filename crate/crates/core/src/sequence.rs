//! Allocation request sequences and their replay file format.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::BlockRole;
use crate::units::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRequest {
    pub seq_no: u64,
    pub kind: RequestKind,
    pub block_id: u64,
    pub size: u64,
    pub virtual_ts: Nanos,
    pub stream: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("request {seq_no}: block {block_id} freed before it was allocated")]
    FreeBeforeAlloc { seq_no: u64, block_id: u64 },
    #[error("request {seq_no}: block {block_id} allocated twice")]
    DuplicateAlloc { seq_no: u64, block_id: u64 },
    #[error("request {seq_no}: block {block_id} freed twice")]
    DoubleFree { seq_no: u64, block_id: u64 },
    #[error("request {seq_no}: zero-sized allocation")]
    ZeroSize { seq_no: u64 },
    #[error("malformed sequence file: {0}")]
    Format(String),
}

/// Checks that every free follows its allocation and no block is allocated
/// or freed twice.
pub fn validate(requests: &[MemoryRequest]) -> Result<(), SequenceError> {
    let mut live = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for r in requests {
        match r.kind {
            RequestKind::Alloc => {
                if r.size == 0 {
                    return Err(SequenceError::ZeroSize { seq_no: r.seq_no });
                }
                if !seen.insert(r.block_id) {
                    return Err(SequenceError::DuplicateAlloc {
                        seq_no: r.seq_no,
                        block_id: r.block_id,
                    });
                }
                live.insert(r.block_id);
            }
            RequestKind::Free => {
                if !live.remove(&r.block_id) {
                    let err = if seen.contains(&r.block_id) {
                        SequenceError::DoubleFree {
                            seq_no: r.seq_no,
                            block_id: r.block_id,
                        }
                    } else {
                        SequenceError::FreeBeforeAlloc {
                            seq_no: r.seq_no,
                            block_id: r.block_id,
                        }
                    };
                    return Err(err);
                }
            }
        }
    }
    Ok(())
}

/// Time-ordered requests for the allocator, plus the bookkeeping needed to
/// explain them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RequestSequence {
    pub requests: Vec<MemoryRequest>,
    /// Start of each replayed iteration, then the end of the last one.
    pub iteration_boundaries: Vec<Nanos>,
    pub phase_tags: BTreeMap<u64, BlockRole>,
    /// Iteration each block belongs to; model-load blocks have none.
    pub block_iteration: BTreeMap<u64, usize>,
    /// Zero-grad call times on the virtual timeline.
    pub zero_grad_marks: Vec<Nanos>,
}

impl RequestSequence {
    pub fn validate(&self) -> Result<(), SequenceError> {
        validate(&self.requests)
    }

    pub fn iteration_count(&self) -> usize {
        self.iteration_boundaries.len().saturating_sub(1)
    }

    pub fn role_of(&self, block_id: u64) -> Option<BlockRole> {
        self.phase_tags.get(&block_id).copied()
    }

    /// Requests whose block belongs to iteration `i`.
    pub fn iteration_requests(&self, i: usize) -> impl Iterator<Item = &MemoryRequest> {
        self.requests
            .iter()
            .filter(move |r| self.block_iteration.get(&r.block_id) == Some(&i))
    }

    /// Σ allocation bytes per role.
    pub fn bytes_by_role(&self) -> BTreeMap<BlockRole, u64> {
        let mut out = BTreeMap::new();
        for r in self
            .requests
            .iter()
            .filter(|r| r.kind == RequestKind::Alloc)
        {
            let role = self.role_of(r.block_id).unwrap_or(BlockRole::Unclassified);
            *out.entry(role).or_insert(0) += r.size;
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ReplayRecord {
    seq_no: u64,
    kind: RequestKind,
    block_id: u64,
    size: u64,
    stream: u32,
}

/// Serializes requests in the replay format: a JSON list of
/// `{seq_no, kind, block_id, size, stream}` objects.
pub fn to_replay_json(requests: &[MemoryRequest]) -> String {
    let records: Vec<ReplayRecord> = requests
        .iter()
        .map(|r| ReplayRecord {
            seq_no: r.seq_no,
            kind: r.kind,
            block_id: r.block_id,
            size: r.size,
            stream: r.stream,
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("plain records serialize")
}

/// Reads the replay format. Requests keep file order; `virtual_ts` is set to
/// the position in the file.
pub fn from_replay_json(text: &str) -> Result<Vec<MemoryRequest>, SequenceError> {
    let records: Vec<ReplayRecord> =
        serde_json::from_str(text).map_err(|e| SequenceError::Format(e.to_string()))?;
    Ok(records
        .into_iter()
        .enumerate()
        .map(|(i, r)| MemoryRequest {
            seq_no: r.seq_no,
            kind: r.kind,
            block_id: r.block_id,
            size: r.size,
            virtual_ts: i as Nanos,
            stream: r.stream,
        })
        .collect())
}

/// Builds a sequence from `(kind, block, size)` triples, numbering requests
/// in order. Handy for tests and hand-written scenarios.
pub fn requests_from(ops: &[(RequestKind, u64, u64)]) -> Vec<MemoryRequest> {
    ops.iter()
        .enumerate()
        .map(|(i, &(kind, block_id, size))| MemoryRequest {
            seq_no: i as u64,
            kind,
            block_id,
            size,
            virtual_ts: i as Nanos,
            stream: 0,
        })
        .collect()
}
