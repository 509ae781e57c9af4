//! Random well-formed request sequences for stress tests and benchmarks.

use rand::Rng;

use crate::sequence::{MemoryRequest, RequestKind};
use crate::units::{Nanos, MIB};

#[derive(Debug, Clone)]
pub struct RandomSequenceSpec {
    pub len: usize,
    pub max_size: u64,
    pub streams: u32,
    /// Chance that a step allocates while blocks are live.
    pub alloc_bias: f64,
    /// Free every block left live at the end.
    pub drain: bool,
}

impl Default for RandomSequenceSpec {
    fn default() -> Self {
        Self {
            len: 200,
            max_size: 64 * MIB,
            streams: 1,
            alloc_bias: 0.55,
            drain: true,
        }
    }
}

fn pick_size<R: Rng + ?Sized>(rng: &mut R, max_size: u64) -> u64 {
    // Spread requests over the small, mid and large segment classes.
    let cap = match rng.gen_range(0..10) {
        0..=4 => MIB,
        5..=7 => 10 * MIB,
        _ => max_size,
    };
    let cap = cap.min(max_size).max(1);
    if rng.gen_bool(0.2) {
        // Exact multiples of the alignment exercise zero remainders.
        (rng.gen_range(1..=cap.div_ceil(512))) * 512
    } else {
        rng.gen_range(1..=cap)
    }
}

/// Generates a sequence in which every free follows its allocation.
pub fn random_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &RandomSequenceSpec,
) -> Vec<MemoryRequest> {
    let mut out = Vec::with_capacity(spec.len + spec.len / 2);
    let mut live: Vec<(u64, u64, u32)> = Vec::new();
    let mut next_id = 0;
    let push = |out: &mut Vec<MemoryRequest>, kind, (block_id, size, stream): (u64, u64, u32)| {
        let seq_no = out.len() as u64;
        out.push(MemoryRequest {
            seq_no,
            kind,
            block_id,
            size,
            virtual_ts: seq_no as Nanos,
            stream,
        });
    };
    for _ in 0..spec.len {
        if live.is_empty() || rng.gen_bool(spec.alloc_bias) {
            let block = (
                next_id,
                pick_size(rng, spec.max_size),
                rng.gen_range(0..spec.streams.max(1)),
            );
            next_id += 1;
            live.push(block);
            push(&mut out, RequestKind::Alloc, block);
        } else {
            let i = rng.gen_range(0..live.len());
            let block = live.swap_remove(i);
            push(&mut out, RequestKind::Free, block);
        }
    }
    if spec.drain {
        while !live.is_empty() {
            let i = rng.gen_range(0..live.len());
            let block = live.swap_remove(i);
            push(&mut out, RequestKind::Free, block);
        }
    }
    out
}
