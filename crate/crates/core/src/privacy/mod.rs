//! Randomness, noise, hashing, Hadamard machinery and budget accounting shared
//! by every mechanism.

pub mod budget;
pub mod hadamard;
pub mod hash;
pub mod noise;
pub mod public;
pub mod rng;

pub use budget::{Budget, BudgetLedger};
pub use hadamard::{fwht, hadamard_entry, next_pow2};
pub use hash::{make_hash_pair, HashPair};
pub use noise::{laplace_sample, randomized_response_sign, rr_debias_factor, rr_keep_probability};
pub use public::{Assignment, PublicRandomness};
pub use rng::{derive_seed, Purpose, Streams};
