//! Sylvester–Hadamard matrices, evaluated entrywise or applied via the fast
//! Walsh–Hadamard transform.

use crate::error::{Error, Result};

/// Smallest power of two `>= n` (with `next_pow2(0) == 1`).
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Entry `(r, c)` of the `k × k` Sylvester matrix: `(-1)^popcount(r & c)`.
pub fn hadamard_entry(k: usize, r: usize, c: usize) -> Result<i8> {
    if !k.is_power_of_two() {
        return Err(Error::invalid(format!("Hadamard size {k} is not a power of two")));
    }
    if r >= k || c >= k {
        return Err(Error::invalid(format!("index ({r}, {c}) out of range for size {k}")));
    }
    Ok(sign(r, c))
}

/// Unchecked entry; callers guarantee the indices are in range.
#[inline]
pub fn sign(r: usize, c: usize) -> i8 {
    if (r & c).count_ones().is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// In-place unnormalized transform `v ← H v`. `v.len()` must be a power of two.
pub fn fwht(v: &mut [f64]) {
    let n = v.len();
    assert!(n.is_power_of_two(), "fwht length {n} is not a power of two");
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
}
