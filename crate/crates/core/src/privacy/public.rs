use rand::Rng;

use super::hash::{make_hash_pair, HashPair};
use super::rng::{Purpose, Streams};
use crate::error::{Error, Result};

/// A user's slot in the prefix-tree protocol: which tree level it reports on,
/// which hash pair it uses and which Hadamard row encodes its bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub level: usize,
    pub hash: usize,
    pub row: usize,
}

/// Randomness shared by the curator and every user.
///
/// All assignments are pure functions of `(seed, user_id)`, so a user can
/// derive its own slot locally and the curator derives the same one.
#[derive(Debug, Clone)]
pub struct PublicRandomness {
    streams: Streams,
    levels: usize,
    hashes: Vec<HashPair>,
    k: usize,
}

impl PublicRandomness {
    pub fn new(seed: u64, levels: usize, num_hashes: usize, k: usize) -> Result<Self> {
        if levels == 0 || num_hashes == 0 {
            return Err(Error::invalid("levels and hash count must be positive"));
        }
        if !k.is_power_of_two() || k < 2 {
            return Err(Error::invalid(format!("hash range k = {k} must be a power of two >= 2")));
        }
        let streams = Streams::new(seed);
        let hashes = (0..num_hashes)
            .map(|j| make_hash_pair(streams.seed_for(j as u64, 0, Purpose::HashFamily), k))
            .collect::<Result<Vec<_>>>()?;
        Ok(PublicRandomness {
            streams,
            levels,
            hashes,
            k,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn num_hashes(&self) -> usize {
        self.hashes.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hash_pair(&self, j: usize) -> &HashPair {
        &self.hashes[j]
    }

    pub fn assignment(&self, user: usize) -> Assignment {
        let mut cell = self.streams.rng(user as u64, 0, Purpose::Partition);
        let level = cell.random_range(0..self.levels);
        let hash = cell.random_range(0..self.hashes.len());
        let row = self
            .streams
            .rng(user as u64, 0, Purpose::HadamardRow)
            .random_range(0..self.k);
        Assignment { level, hash, row }
    }
}
