//! Pairwise-independent hashing via degree-1 polynomials over the Mersenne
//! prime field `2^61 - 1`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MERSENNE_61: u64 = (1u64 << 61) - 1;

#[inline]
fn mod_mersenne(x: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let folded = (x & p) + (x >> 61);
    let folded = (folded & p) + (folded >> 61);
    let r = folded as u64;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

/// `x ↦ (a·x + b) mod p` with `a, b` uniform in `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearHash {
    a: u64,
    b: u64,
}

impl LinearHash {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        LinearHash {
            a: rng.random_range(0..MERSENNE_61),
            b: rng.random_range(0..MERSENNE_61),
        }
    }

    #[inline]
    pub fn eval(&self, key: u64) -> u64 {
        let x = mod_mersenne(key as u128);
        mod_mersenne(self.a as u128 * x as u128 + self.b as u128)
    }
}

/// A bucket hash `h: key → [k]` paired with a sign hash `g: key → {-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashPair {
    bucket: LinearHash,
    sign: LinearHash,
    k: usize,
}

impl HashPair {
    pub fn range(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn h(&self, key: u64) -> usize {
        (self.bucket.eval(key) % self.k as u64) as usize
    }

    #[inline]
    pub fn g(&self, key: u64) -> i8 {
        if self.sign.eval(key) & 1 == 0 {
            1
        } else {
            -1
        }
    }
}

pub fn make_hash_pair(seed: u64, k: usize) -> Result<HashPair> {
    if k < 2 {
        return Err(Error::invalid(format!("hash range must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(HashPair {
        bucket: LinearHash::random(&mut rng),
        sign: LinearHash::random(&mut rng),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mersenne_reduction() {
        assert_eq!(mod_mersenne(MERSENNE_61 as u128), 0);
        assert_eq!(mod_mersenne(MERSENNE_61 as u128 + 5), 5);
        let big = (MERSENNE_61 as u128 - 1) * (MERSENNE_61 as u128 - 1);
        assert_eq!(mod_mersenne(big), (big % MERSENNE_61 as u128) as u64);
    }

    #[test]
    fn same_seed_same_functions() {
        let a = make_hash_pair(9, 16).unwrap();
        let b = make_hash_pair(9, 16).unwrap();
        assert_eq!(a, b);
        for key in 0..200u64 {
            assert_eq!(a.h(key), b.h(key));
            assert_eq!(a.g(key), b.g(key));
        }
        assert_ne!(make_hash_pair(10, 16).unwrap(), a);
    }

    #[test]
    fn rejects_tiny_range() {
        assert!(make_hash_pair(0, 1).is_err());
    }

    #[test]
    fn collision_rate_near_one_over_k() {
        // Fresh function per pair: the pairwise-independence statement is over
        // the random choice of function.
        let k = 16usize;
        let trials = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut collisions = 0usize;
        for t in 0..trials {
            let hp = make_hash_pair(t as u64 ^ 0xABCD, k).unwrap();
            let x: u64 = rng.random_range(0..1 << 20);
            let mut y: u64 = rng.random_range(0..1 << 20);
            while y == x {
                y = rng.random_range(0..1 << 20);
            }
            if hp.h(x) == hp.h(y) {
                collisions += 1;
            }
        }
        let p = 1.0 / k as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let rate = collisions as f64 / trials as f64;
        assert!((rate - p).abs() < 3.0 * se, "rate {rate} vs {p} ± {se}");
    }

    #[test]
    fn sign_hash_balanced() {
        let hp = make_hash_pair(5, 8).unwrap();
        let n = 100_000u64;
        let total: i64 = (0..n).map(|key| hp.g(key * 7919 + 13) as i64).sum();
        assert!((total as f64 / n as f64).abs() < 0.02);
    }
}
