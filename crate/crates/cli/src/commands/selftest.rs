use anyhow::Result;
use clap::Args;
use peakmem_core::alloc::random::{random_sequence, RandomSequenceSpec};
use peakmem_core::alloc::{reference, replay};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::{AllocatorArgs, Outcome};

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Number of random sequences.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Requests per sequence.
    #[arg(long, default_value_t = 200)]
    pub length: usize,
    /// Allocator streams to spread requests over.
    #[arg(long, default_value_t = 1)]
    pub streams: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub allocator: AllocatorArgs,
}

pub fn run(args: SelftestArgs, cfg: &Config) -> Result<Outcome> {
    let alloc_cfg = cfg
        .allocator(&args.allocator, Some(u64::MAX))?
        .expect("a fallback capacity was given");
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let spec = RandomSequenceSpec {
        len: args.length,
        streams: args.streams.max(1),
        ..Default::default()
    };
    let mut mismatches = 0;
    for i in 0..args.count {
        let reqs = random_sequence(&mut rng, &spec);
        if replay(&reqs, &alloc_cfg)? != reference::replay(&reqs, &alloc_cfg)? {
            mismatches += 1;
            eprintln!(
                "sequence {i} (seed {}): allocator model and reference disagree",
                args.seed
            );
        }
    }
    println!("{} sequences, {mismatches} mismatches", args.count);
    Ok(if mismatches == 0 {
        Outcome::Ok
    } else {
        Outcome::Flagged
    })
}
