//! Keyed random substreams.
//!
//! Every random draw in a protocol run comes from a ChaCha stream whose seed
//! is a hash of `(master seed, user id, round, purpose)`. Two parties that know
//! the master seed derive identical streams, and the result of a run does not
//! depend on how users are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. Part of the derivation key so that streams
/// for different mechanisms never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Truth = 1,
    Data = 2,
    Selector = 3,
    Partition = 4,
    HashFamily = 5,
    HadamardRow = 6,
    Report = 7,
    Range = 8,
    Mean = 9,
    Rotation = 10,
    Batch = 11,
    Replication = 12,
    Shuffle = 13,
    Stage = 14,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// A node in the seed tree. Cheap to copy; children are derived by hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    key: u64,
}

impl Streams {
    pub fn new(master_seed: u64) -> Self {
        Streams {
            key: derive_seed(&[master_seed]),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Sub-tree for a named stage (e.g. one protocol call inside a larger run).
    pub fn child(&self, purpose: Purpose, id: u64) -> Streams {
        Streams {
            key: derive_seed(&[self.key, Purpose::Stage as u64, purpose as u64, id]),
        }
    }

    pub fn seed_for(&self, user: u64, round: u64, purpose: Purpose) -> u64 {
        derive_seed(&[self.key, user, round, purpose as u64])
    }

    /// The substream owned by `user` for `round` of `purpose`.
    pub fn rng(&self, user: u64, round: u64, purpose: Purpose) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed_for(user, round, purpose))
    }

    /// A stream not tied to any user; used for curator-side or public draws.
    pub fn public(&self, purpose: Purpose, round: u64) -> ChaCha8Rng {
        self.rng(u64::MAX, round, purpose)
    }
}
