//! Deterministic random stream derivation.
//!
//! Every random draw in a run comes from a stream whose seed is a pure
//! function of the master seed and a path of integer tags (level, replicate,
//! time, particle, ...). Results therefore do not depend on how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Random number generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

const TAG_PROPAGATE: u64 = 0x7072_6f70;
const TAG_RESAMPLE: u64 = 0x7265_736d;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the stream tree. Children are derived by hashing a tag into the
/// parent key, so distinct tag paths give (with overwhelming probability)
/// distinct, independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(pub u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed))
    }

    pub fn child(self, tag: u64) -> Self {
        StreamKey(mix64(self.0 ^ mix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))))
    }

    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |k, &t| k.child(t))
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }

    /// Stream for propagating particle `i` from time `k-1` to `k`.
    pub fn particle(self, k: usize, i: usize) -> StreamRng {
        self.path(&[TAG_PROPAGATE, k as u64, i as u64]).rng()
    }

    /// Stream for the resampling step at time `k`.
    pub fn resample(self, k: usize) -> StreamRng {
        self.path(&[TAG_RESAMPLE, k as u64]).rng()
    }
}

/// Seed for one multilevel run: the master seed plus the replicate index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeed {
    pub master: u64,
    pub replicate: u64,
}

impl RunSeed {
    pub fn new(master: u64, replicate: u64) -> Self {
        RunSeed { master, replicate }
    }

    /// Stream for level `l`; depends only on (master, level, replicate).
    pub fn level(self, l: u32) -> StreamKey {
        StreamKey::new(self.master).path(&[0x6c65_7665_6c, l as u64, self.replicate])
    }
}

impl From<u64> for RunSeed {
    fn from(master: u64) -> Self {
        RunSeed::new(master, 0)
    }
}
