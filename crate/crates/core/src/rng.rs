//! Deterministic random streams derived from one seed.
//!
//! Every consumer of randomness asks for a named stream ("init", "train",
//! "eval", "universal", ...). Streams are independent ChaCha generators, so
//! drawing more from one never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Splits a root seed into named, independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSplitter {
    seed: u64,
}

impl StreamSplitter {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        self.indexed(name, 0)
    }

    /// The `index`-th sub-stream of `name`, e.g. one per worker thread.
    pub fn indexed(&self, name: &str, index: u64) -> StreamRng {
        let key = splitmix64(self.seed ^ splitmix64(fnv1a(name.as_bytes()) ^ splitmix64(index)));
        ChaCha8Rng::seed_from_u64(key)
    }
}
