//! Keyed random streams.
//!
//! Every random draw in a simulation comes from a ChaCha8 stream whose seed
//! is a hash of `(run seed, purpose tag, indices...)`. Streams never depend
//! on thread scheduling or on how many other streams were consumed first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    Partition = 3,
    Minibatch = 4,
    Blobs = 5,
    Repeat = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit key.
pub fn stream_key(seed: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6A09_E667_F3BC_C909);
    h = splitmix64(h ^ stream as u64);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn keyed_rng(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, stream, parts))
}
