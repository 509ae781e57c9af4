use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use super::{
    AllocError, AllocatorConfig, BlockSnapshot, OomEvent, ReplayError, SegmentSnapshot,
    SimulationResult, TimelinePoint,
};
use crate::sequence::{self, MemoryRequest, RequestKind};

#[derive(Debug, Clone)]
struct Block {
    segment: u64,
    stream: u32,
    offset: u64,
    size: u64,
    handle: Option<u64>,
    prev: Option<usize>,
    next: Option<usize>,
}

impl Block {
    fn addr(&self) -> u64 {
        self.segment + self.offset
    }
}

#[derive(Debug, Clone)]
struct Segment {
    size: u64,
    stream: u32,
    head: usize,
}

/// (stream, size, address, block index)
type PoolKey = (u32, u64, u64, usize);

/// Segment-level model of the CUDA caching allocator.
///
/// Blocks live in an arena and form a doubly linked list per segment. Free
/// blocks are indexed by `(stream, size, address)` so best fit is a single
/// ordered lookup.
#[derive(Debug, Clone)]
pub struct CachingAllocator {
    cfg: AllocatorConfig,
    blocks: Vec<Block>,
    spare: Vec<usize>,
    segments: BTreeMap<u64, Segment>,
    pool: BTreeSet<PoolKey>,
    live: HashMap<u64, usize>,
    retired: HashSet<u64>,
    next_base: u64,
    reserved: u64,
    allocated: u64,
    peak_reserved: u64,
    peak_allocated: u64,
}

impl CachingAllocator {
    pub fn new(cfg: AllocatorConfig) -> Result<Self, AllocError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            blocks: Vec::new(),
            spare: Vec::new(),
            segments: BTreeMap::new(),
            pool: BTreeSet::new(),
            live: HashMap::new(),
            retired: HashSet::new(),
            next_base: 0,
            reserved: 0,
            allocated: 0,
            peak_reserved: 0,
            peak_allocated: 0,
        })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.cfg
    }

    pub fn reserved(&self) -> u64 {
        self.reserved
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn peak_reserved(&self) -> u64 {
        self.peak_reserved
    }

    pub fn peak_allocated(&self) -> u64 {
        self.peak_allocated
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Address of a live allocation.
    pub fn address_of(&self, handle: u64) -> Option<u64> {
        self.live.get(&handle).map(|&i| self.blocks[i].addr())
    }

    /// Serves a request and returns the block address.
    pub fn allocate(&mut self, handle: u64, size: u64, stream: u32) -> Result<u64, AllocError> {
        if self.live.contains_key(&handle) {
            return Err(AllocError::DuplicateHandle(handle));
        }
        let rounded = self.cfg.round_request(size)?;
        if let Some(idx) = self.best_fit(stream, rounded) {
            let split = !self.cfg.is_oversize(self.blocks[idx].size);
            return Ok(self.take(idx, rounded, handle, split));
        }
        let seg_size = self.cfg.segment_size_for(rounded);
        if !self.fits(seg_size) {
            self.release_for(seg_size);
        }
        if !self.fits(seg_size) {
            return Err(AllocError::OutOfMemory {
                requested: rounded,
                segment: seg_size,
                reserved: self.reserved,
                capacity: self.cfg.device_capacity,
            });
        }
        let idx = self.create_segment(seg_size, stream);
        // A fresh segment is always carved, even when it exceeds the split
        // limit; otherwise a small request would pin a whole large segment.
        Ok(self.take(idx, rounded, handle, true))
    }

    pub fn free(&mut self, handle: u64) -> Result<(), AllocError> {
        let Some(mut idx) = self.live.remove(&handle) else {
            return Err(if self.retired.contains(&handle) {
                AllocError::DoubleFree(handle)
            } else {
                AllocError::UnknownHandle(handle)
            });
        };
        self.retired.insert(handle);
        self.allocated -= self.blocks[idx].size;
        self.blocks[idx].handle = None;

        if let Some(p) = self.blocks[idx]
            .prev
            .filter(|&p| self.blocks[p].handle.is_none())
        {
            self.pool.remove(&self.key(p));
            self.absorb_next(p);
            idx = p;
        }
        if let Some(n) = self.blocks[idx]
            .next
            .filter(|&n| self.blocks[n].handle.is_none())
        {
            self.pool.remove(&self.key(n));
            self.absorb_next(idx);
        }
        self.pool.insert(self.key(idx));
        Ok(())
    }

    fn key(&self, idx: usize) -> PoolKey {
        let b = &self.blocks[idx];
        (b.stream, b.size, b.addr(), idx)
    }

    fn fits(&self, seg_size: u64) -> bool {
        self.reserved
            .checked_add(seg_size)
            .is_some_and(|t| t <= self.cfg.device_capacity)
    }

    fn best_fit(&self, stream: u32, rounded: u64) -> Option<usize> {
        let &(s, size, _, idx) = self.pool.range((stream, rounded, 0, 0)..).next()?;
        if s != stream {
            return None;
        }
        // Candidates ascend by size, so if the smallest is an oversize block
        // left too large by this request, every other candidate is as well.
        if let Some(m) = self.cfg.max_split_size {
            if size > m && size - rounded >= m {
                return None;
            }
        }
        Some(idx)
    }

    fn take(&mut self, idx: usize, rounded: u64, handle: u64, split: bool) -> u64 {
        self.pool.remove(&self.key(idx));
        let rest = self.blocks[idx].size - rounded;
        if split && rest > 0 {
            debug_assert!(rest >= self.cfg.alignment);
            let b = &self.blocks[idx];
            let tail = Block {
                segment: b.segment,
                stream: b.stream,
                offset: b.offset + rounded,
                size: rest,
                handle: None,
                prev: Some(idx),
                next: b.next,
            };
            let t = self.slot(tail);
            if let Some(n) = self.blocks[t].next {
                self.blocks[n].prev = Some(t);
            }
            self.blocks[idx].next = Some(t);
            self.blocks[idx].size = rounded;
            self.pool.insert(self.key(t));
        }
        let b = &mut self.blocks[idx];
        b.handle = Some(handle);
        self.allocated += b.size;
        self.peak_allocated = self.peak_allocated.max(self.allocated);
        self.live.insert(handle, idx);
        b.addr()
    }

    fn slot(&mut self, block: Block) -> usize {
        match self.spare.pop() {
            Some(i) => {
                self.blocks[i] = block;
                i
            }
            None => {
                self.blocks.push(block);
                self.blocks.len() - 1
            }
        }
    }

    /// Merges the successor of `idx` into it.
    fn absorb_next(&mut self, idx: usize) {
        let n = self.blocks[idx].next.expect("block has a successor");
        let (size, after) = (self.blocks[n].size, self.blocks[n].next);
        self.blocks[idx].size += size;
        self.blocks[idx].next = after;
        if let Some(a) = after {
            self.blocks[a].prev = Some(idx);
        }
        self.spare.push(n);
    }

    fn create_segment(&mut self, size: u64, stream: u32) -> usize {
        let base = self.next_base;
        self.next_base += size;
        let head = self.slot(Block {
            segment: base,
            stream,
            offset: 0,
            size,
            handle: None,
            prev: None,
            next: None,
        });
        self.segments.insert(base, Segment { size, stream, head });
        self.pool.insert(self.key(head));
        self.reserved += size;
        self.peak_reserved = self.peak_reserved.max(self.reserved);
        head
    }

    fn is_unused(&self, seg: &Segment) -> bool {
        let head = &self.blocks[seg.head];
        head.handle.is_none() && head.next.is_none()
    }

    fn release_segment(&mut self, base: u64) {
        let seg = self.segments.remove(&base).expect("segment exists");
        self.pool.remove(&self.key(seg.head));
        self.spare.push(seg.head);
        self.reserved -= seg.size;
    }

    /// Returns cached segments to the device until `seg_size` more bytes fit:
    /// oversize segments first, largest first, then everything unused.
    fn release_for(&mut self, seg_size: u64) {
        if let Some(m) = self.cfg.max_split_size {
            let mut big: Vec<(u64, u64)> = self
                .segments
                .iter()
                .filter(|(_, s)| s.size > m && self.is_unused(s))
                .map(|(&base, s)| (s.size, base))
                .collect();
            big.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, base) in big {
                if self.fits(seg_size) {
                    return;
                }
                self.release_segment(base);
            }
        }
        if self.fits(seg_size) {
            return;
        }
        let unused: Vec<u64> = self
            .segments
            .iter()
            .filter(|(_, s)| self.is_unused(s))
            .map(|(&base, _)| base)
            .collect();
        for base in unused {
            self.release_segment(base);
        }
    }

    pub fn snapshot(&self) -> Vec<SegmentSnapshot> {
        self.segments
            .iter()
            .map(|(&base, seg)| {
                let mut blocks = Vec::new();
                let mut cur = Some(seg.head);
                while let Some(i) = cur {
                    let b = &self.blocks[i];
                    blocks.push(BlockSnapshot {
                        offset: b.offset,
                        size: b.size,
                        handle: b.handle,
                    });
                    cur = b.next;
                }
                SegmentSnapshot {
                    base,
                    size: seg.size,
                    stream: seg.stream,
                    blocks,
                }
            })
            .collect()
    }

    /// Verifies the structural invariants, describing the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let align = self.cfg.alignment;
        let mut reserved = 0;
        let mut allocated = 0;
        let mut free_keys = BTreeSet::new();
        let mut live = 0;
        for (&base, seg) in &self.segments {
            reserved += seg.size;
            let mut expect_offset = 0;
            let mut prev: Option<usize> = None;
            let mut cur = Some(seg.head);
            while let Some(i) = cur {
                let b = &self.blocks[i];
                if b.segment != base || b.prev != prev || b.stream != seg.stream {
                    return Err(format!("segment {base:#x}: broken links at block {i}"));
                }
                if b.offset != expect_offset {
                    return Err(format!(
                        "segment {base:#x}: gap or overlap at offset {expect_offset}"
                    ));
                }
                if b.size == 0 || !b.size.is_multiple_of(align) || !b.addr().is_multiple_of(align) {
                    return Err(format!(
                        "segment {base:#x}: misaligned block at {}",
                        b.offset
                    ));
                }
                match b.handle {
                    Some(h) => {
                        allocated += b.size;
                        live += 1;
                        if self.live.get(&h) != Some(&i) {
                            return Err(format!("handle {h} not tracked"));
                        }
                    }
                    None => {
                        if prev.is_some_and(|p| self.blocks[p].handle.is_none()) {
                            return Err(format!(
                                "segment {base:#x}: adjacent free blocks at {}",
                                b.offset
                            ));
                        }
                        free_keys.insert(self.key(i));
                    }
                }
                expect_offset += b.size;
                prev = Some(i);
                cur = b.next;
            }
            if expect_offset != seg.size {
                return Err(format!("segment {base:#x}: blocks do not tile"));
            }
        }
        if reserved != self.reserved {
            return Err(format!("reserved {} != segments {reserved}", self.reserved));
        }
        if allocated != self.allocated {
            return Err(format!(
                "allocated {} != blocks {allocated}",
                self.allocated
            ));
        }
        if self.allocated > self.reserved || self.reserved > self.cfg.device_capacity {
            return Err("allocated <= reserved <= capacity violated".into());
        }
        if live != self.live.len() {
            return Err("live handle table out of sync".into());
        }
        if free_keys != self.pool {
            return Err("free pool out of sync with free blocks".into());
        }
        Ok(())
    }
}

/// Replays a request sequence, recording reserved and allocated bytes after
/// every request. Stops at the first request that cannot be served.
pub fn replay(
    requests: &[MemoryRequest],
    cfg: &AllocatorConfig,
) -> Result<SimulationResult, ReplayError> {
    sequence::validate(requests)?;
    let mut alloc = CachingAllocator::new(cfg.clone()).map_err(ReplayError::Allocator)?;
    let mut timeline = Vec::with_capacity(requests.len());
    let mut oom = None;
    for r in requests {
        match r.kind {
            RequestKind::Alloc => match alloc.allocate(r.block_id, r.size, r.stream) {
                Ok(_) => {}
                Err(AllocError::OutOfMemory {
                    requested,
                    segment,
                    reserved,
                    ..
                }) => {
                    oom = Some(OomEvent {
                        seq_no: r.seq_no,
                        block_id: r.block_id,
                        requested,
                        segment,
                        reserved,
                    });
                    break;
                }
                Err(e) => return Err(ReplayError::Allocator(e)),
            },
            RequestKind::Free => alloc.free(r.block_id).map_err(ReplayError::Allocator)?,
        }
        timeline.push(TimelinePoint {
            seq_no: r.seq_no,
            reserved: alloc.reserved(),
            allocated: alloc.allocated(),
        });
    }
    Ok(SimulationResult {
        peak_reserved: alloc.peak_reserved(),
        peak_allocated: alloc.peak_allocated(),
        final_reserved: alloc.reserved(),
        final_allocated: alloc.allocated(),
        timeline,
        oom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::requests_from;
    use crate::units::MIB;
    use RequestKind::*;

    fn alloc() -> CachingAllocator {
        CachingAllocator::new(AllocatorConfig::default()).unwrap()
    }

    #[test]
    fn small_requests_share_a_segment() {
        let mut a = alloc();
        let x = a.allocate(1, 1000, 0).unwrap();
        let y = a.allocate(2, 1000, 0).unwrap();
        assert_eq!(y - x, 1024);
        assert_eq!(a.reserved(), 2 * MIB);
        assert_eq!(a.allocated(), 2048);
        a.check_invariants().unwrap();
    }

    #[test]
    fn free_coalesces_and_keeps_segment() {
        let mut a = alloc();
        a.allocate(1, 512, 0).unwrap();
        a.allocate(2, 512, 0).unwrap();
        a.allocate(3, 512, 0).unwrap();
        a.free(1).unwrap();
        a.free(3).unwrap();
        a.check_invariants().unwrap();
        assert_eq!(a.snapshot()[0].blocks.len(), 3);
        a.free(2).unwrap();
        a.check_invariants().unwrap();
        assert_eq!(a.snapshot()[0].blocks.len(), 1);
        assert_eq!(a.reserved(), 2 * MIB);
        assert_eq!(a.allocated(), 0);
    }

    #[test]
    fn best_fit_prefers_smallest_then_lowest_address() {
        let mut a = alloc();
        for h in 0..6 {
            a.allocate(h, 4096, 0).unwrap();
        }
        // Holes of 4 KiB at handle 1 and 8 KiB at handles 3+4.
        a.free(1).unwrap();
        a.free(3).unwrap();
        a.free(4).unwrap();
        let hole = a.address_of(0).unwrap() + 4096;
        assert_eq!(a.allocate(10, 4000, 0).unwrap(), hole);
    }

    #[test]
    fn streams_do_not_share_blocks() {
        let mut a = alloc();
        a.allocate(1, 512, 0).unwrap();
        a.allocate(2, 512, 1).unwrap();
        assert_eq!(a.segment_count(), 2);
        a.check_invariants().unwrap();
    }

    #[test]
    fn oversize_blocks_are_not_split() {
        let cfg = AllocatorConfig::default().with_max_split_size(Some(4 * MIB));
        let mut a = CachingAllocator::new(cfg).unwrap();
        a.allocate(1, 12 * MIB, 0).unwrap();
        a.free(1).unwrap();
        // 12 MiB cached block: a 9 MiB request leaves 3 MiB < limit, taken whole.
        a.allocate(2, 9 * MIB, 0).unwrap();
        assert_eq!(a.allocated(), 12 * MIB);
        a.free(2).unwrap();
        // A 2 MiB request would leave 10 MiB, so a new segment is made.
        a.allocate(3, 2 * MIB, 0).unwrap();
        assert_eq!(a.segment_count(), 2);
        a.check_invariants().unwrap();
    }

    #[test]
    fn exhaustion_releases_cached_segments() {
        let mut a = CachingAllocator::new(AllocatorConfig::with_capacity(30 * MIB)).unwrap();
        a.allocate(1, 20 * MIB, 0).unwrap();
        a.free(1).unwrap();
        a.allocate(2, 22 * MIB, 0).unwrap();
        assert_eq!(a.reserved(), 22 * MIB);
        assert_eq!(a.segment_count(), 1);
        assert!(matches!(
            a.allocate(3, 10 * MIB, 0),
            Err(AllocError::OutOfMemory { .. })
        ));
        a.check_invariants().unwrap();
    }

    #[test]
    fn handle_errors() {
        let mut a = alloc();
        a.allocate(1, 512, 0).unwrap();
        assert_eq!(a.allocate(1, 512, 0), Err(AllocError::DuplicateHandle(1)));
        assert_eq!(a.allocate(2, 0, 0), Err(AllocError::ZeroSize));
        a.free(1).unwrap();
        assert_eq!(a.free(1), Err(AllocError::DoubleFree(1)));
        assert_eq!(a.free(7), Err(AllocError::UnknownHandle(7)));
    }

    #[test]
    fn replay_records_timeline_and_stops_at_oom() {
        let reqs = requests_from(&[
            (Alloc, 1, 8 * MIB),
            (Alloc, 2, 8 * MIB),
            (Free, 1, 8 * MIB),
            (Alloc, 3, 30 * MIB),
            (Free, 2, 8 * MIB),
        ]);
        let r = replay(&reqs, &AllocatorConfig::with_capacity(40 * MIB)).unwrap();
        assert_eq!(r.timeline.len(), 3);
        assert_eq!(r.peak_reserved, 20 * MIB);
        assert_eq!(r.peak_allocated, 16 * MIB);
        let oom = r.oom.unwrap();
        assert_eq!((oom.seq_no, oom.segment), (3, 30 * MIB));

        let bad = requests_from(&[(Free, 1, 512)]);
        assert!(matches!(
            replay(&bad, &AllocatorConfig::default()),
            Err(ReplayError::MalformedSequence(_))
        ));
    }
}
