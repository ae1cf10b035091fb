//! Seed derivation.
//!
//! Every stochastic step (drift instance, mini-batch shuffle, projection init)
//! gets its own generator whose seed is derived from a root seed plus a
//! stream tag and counters, so results never depend on call order or on the
//! number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags keep derived seeds for different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Projections = 0x5052_4f4a,
    TrainDrift = 0x5444_5246,
    TrainShuffle = 0x5453_4846,
    EvalDrift = 0x4556_414c,
    Pretrain = 0x5052_4554,
    Dataset = 0x4441_5441,
    Validate = 0x5641_4c44,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed, a stream tag and any number of counters into a new seed.
pub fn derive_seed(root: u64, stream: Stream, counters: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ splitmix64(stream as u64));
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Seed component for a drift time, so sets trained at different times never
/// share drift instances.
pub fn time_key(t: f64) -> u64 {
    t.to_bits()
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
