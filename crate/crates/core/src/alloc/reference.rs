//! Deliberately naive caching allocator used as a test oracle.
//!
//! Segments are a plain vector in creation order and every lookup is a full
//! scan. It shares no code with the optimized simulator beyond the config and
//! result types, so agreement between the two is meaningful.

use super::{
    AllocError, AllocatorConfig, BlockSnapshot, OomEvent, ReplayError, SegmentSnapshot,
    SimulationResult, TimelinePoint,
};
use crate::sequence::{MemoryRequest, RequestKind, SequenceError};

#[derive(Debug, Clone)]
struct Chunk {
    offset: u64,
    size: u64,
    owner: Option<u64>,
}

#[derive(Debug, Clone)]
struct Seg {
    base: u64,
    size: u64,
    stream: u32,
    chunks: Vec<Chunk>,
}

impl Seg {
    fn unused(&self) -> bool {
        self.chunks.iter().all(|c| c.owner.is_none())
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceAllocator {
    cfg: AllocatorConfig,
    segs: Vec<Seg>,
    next_base: u64,
    peak_reserved: u64,
    peak_allocated: u64,
}

impl ReferenceAllocator {
    pub fn new(cfg: AllocatorConfig) -> Self {
        Self {
            cfg,
            segs: Vec::new(),
            next_base: 0,
            peak_reserved: 0,
            peak_allocated: 0,
        }
    }

    pub fn reserved(&self) -> u64 {
        self.segs.iter().map(|s| s.size).sum()
    }

    pub fn allocated(&self) -> u64 {
        self.segs
            .iter()
            .flat_map(|s| &s.chunks)
            .filter(|c| c.owner.is_some())
            .map(|c| c.size)
            .sum()
    }

    pub fn peak_reserved(&self) -> u64 {
        self.peak_reserved
    }

    pub fn peak_allocated(&self) -> u64 {
        self.peak_allocated
    }

    fn splittable(&self, chunk_size: u64) -> bool {
        match self.cfg.max_split_size {
            Some(m) => chunk_size <= m,
            None => true,
        }
    }

    fn usable(&self, chunk_size: u64, want: u64) -> bool {
        if chunk_size < want {
            return false;
        }
        match self.cfg.max_split_size {
            Some(m) if chunk_size > m => chunk_size - want < m,
            _ => true,
        }
    }

    pub fn allocate(&mut self, handle: u64, size: u64, stream: u32) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let a = self.cfg.alignment;
        let want = size.div_ceil(a) * a;

        let mut best: Option<(u64, u64, usize, usize)> = None;
        for (si, seg) in self.segs.iter().enumerate() {
            if seg.stream != stream {
                continue;
            }
            for (ci, c) in seg.chunks.iter().enumerate() {
                if c.owner.is_none() && self.usable(c.size, want) {
                    let cand = (c.size, seg.base + c.offset, si, ci);
                    if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                        best = Some(cand);
                    }
                }
            }
        }
        if let Some((csize, addr, si, ci)) = best {
            let split = self.splittable(csize);
            self.carve(si, ci, want, handle, split);
            return Ok(addr);
        }

        let seg_size = if want <= self.cfg.k_small_size {
            self.cfg.k_small_buffer
        } else if want <= self.cfg.k_min_large_alloc {
            self.cfg.k_large_buffer
        } else {
            let g = self.cfg.k_round_large;
            want.div_ceil(g) * g
        };
        let cap = self.cfg.device_capacity;
        let fits = |me: &Self| me.reserved() as u128 + seg_size as u128 <= cap as u128;

        if !fits(self) {
            if let Some(m) = self.cfg.max_split_size {
                while !fits(self) {
                    let mut pick: Option<usize> = None;
                    for (i, s) in self.segs.iter().enumerate() {
                        if s.size > m && s.unused() {
                            let better = match pick {
                                None => true,
                                Some(p) => {
                                    let q = &self.segs[p];
                                    s.size > q.size || (s.size == q.size && s.base < q.base)
                                }
                            };
                            if better {
                                pick = Some(i);
                            }
                        }
                    }
                    match pick {
                        Some(i) => {
                            self.segs.remove(i);
                        }
                        None => break,
                    }
                }
            }
            if !fits(self) {
                self.segs.retain(|s| !s.unused());
            }
        }
        if !fits(self) {
            return Err(AllocError::OutOfMemory {
                requested: want,
                segment: seg_size,
                reserved: self.reserved(),
                capacity: cap,
            });
        }

        let base = self.next_base;
        self.next_base += seg_size;
        self.segs.push(Seg {
            base,
            size: seg_size,
            stream,
            chunks: vec![Chunk {
                offset: 0,
                size: seg_size,
                owner: None,
            }],
        });
        self.peak_reserved = self.peak_reserved.max(self.reserved());
        let si = self.segs.len() - 1;
        self.carve(si, 0, want, handle, true);
        Ok(base)
    }

    fn carve(&mut self, si: usize, ci: usize, want: u64, handle: u64, split: bool) {
        let seg = &mut self.segs[si];
        let c = seg.chunks[ci].clone();
        if split && c.size > want {
            seg.chunks[ci].size = want;
            seg.chunks.insert(
                ci + 1,
                Chunk {
                    offset: c.offset + want,
                    size: c.size - want,
                    owner: None,
                },
            );
        }
        seg.chunks[ci].owner = Some(handle);
        self.peak_allocated = self.peak_allocated.max(self.allocated());
    }

    pub fn free(&mut self, handle: u64) -> Result<(), AllocError> {
        for seg in &mut self.segs {
            if let Some(c) = seg.chunks.iter_mut().find(|c| c.owner == Some(handle)) {
                c.owner = None;
                let mut i = 0;
                while i + 1 < seg.chunks.len() {
                    if seg.chunks[i].owner.is_none() && seg.chunks[i + 1].owner.is_none() {
                        let next = seg.chunks.remove(i + 1);
                        seg.chunks[i].size += next.size;
                    } else {
                        i += 1;
                    }
                }
                return Ok(());
            }
        }
        Err(AllocError::UnknownHandle(handle))
    }

    pub fn snapshot(&self) -> Vec<SegmentSnapshot> {
        let mut out: Vec<SegmentSnapshot> = self
            .segs
            .iter()
            .map(|s| SegmentSnapshot {
                base: s.base,
                size: s.size,
                stream: s.stream,
                blocks: s
                    .chunks
                    .iter()
                    .map(|c| BlockSnapshot {
                        offset: c.offset,
                        size: c.size,
                        handle: c.owner,
                    })
                    .collect(),
            })
            .collect();
        out.sort_by_key(|s| s.base);
        out
    }
}

/// Replays with the reference allocator. Same contract as
/// [`super::replay`].
pub fn replay(
    requests: &[MemoryRequest],
    cfg: &AllocatorConfig,
) -> Result<SimulationResult, ReplayError> {
    cfg.validate().map_err(ReplayError::Allocator)?;
    let mut seen = std::collections::HashMap::new();
    for r in requests {
        let state = seen.entry(r.block_id).or_insert(0u8);
        let err = match (r.kind, *state) {
            (RequestKind::Alloc, 0) if r.size > 0 => None,
            (RequestKind::Alloc, 0) => Some(SequenceError::ZeroSize { seq_no: r.seq_no }),
            (RequestKind::Alloc, _) => Some(SequenceError::DuplicateAlloc {
                seq_no: r.seq_no,
                block_id: r.block_id,
            }),
            (RequestKind::Free, 1) => None,
            (RequestKind::Free, 0) => Some(SequenceError::FreeBeforeAlloc {
                seq_no: r.seq_no,
                block_id: r.block_id,
            }),
            (RequestKind::Free, _) => Some(SequenceError::DoubleFree {
                seq_no: r.seq_no,
                block_id: r.block_id,
            }),
        };
        if let Some(e) = err {
            return Err(e.into());
        }
        *state += 1;
    }

    let mut a = ReferenceAllocator::new(cfg.clone());
    let mut timeline = Vec::new();
    let mut oom = None;
    for r in requests {
        match r.kind {
            RequestKind::Alloc => {
                if let Err(e) = a.allocate(r.block_id, r.size, r.stream) {
                    match e {
                        AllocError::OutOfMemory {
                            requested,
                            segment,
                            reserved,
                            ..
                        } => {
                            oom = Some(OomEvent {
                                seq_no: r.seq_no,
                                block_id: r.block_id,
                                requested,
                                segment,
                                reserved,
                            });
                            break;
                        }
                        other => return Err(ReplayError::Allocator(other)),
                    }
                }
            }
            RequestKind::Free => a.free(r.block_id).map_err(ReplayError::Allocator)?,
        }
        timeline.push(TimelinePoint {
            seq_no: r.seq_no,
            reserved: a.reserved(),
            allocated: a.allocated(),
        });
    }
    Ok(SimulationResult {
        peak_reserved: a.peak_reserved(),
        peak_allocated: a.peak_allocated(),
        final_reserved: a.reserved(),
        final_allocated: a.allocated(),
        timeline,
        oom,
    })
}
