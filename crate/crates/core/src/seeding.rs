//! Deterministic seed derivation.
//!
//! Everything stochastic in this crate draws from a ChaCha stream whose seed
//! is derived from a user-facing 64-bit seed plus structural tags (trajectory
//! index, replication index, ...). Derivation is a splitmix64 round over the
//! parent seed xor a scrambled tag, which gives independent-looking child
//! seeds while keeping the schedule a pure function of its inputs: the same
//! configuration always produces the same bytes, regardless of how work is
//! split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Advances a splitmix64 state and returns the next output.
pub fn splitmix64_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a structural tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    let mut state = parent ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    splitmix64_next(&mut state)
}

/// Seed for replication `rep` of the experiment cell (n_trajectories, horizon).
pub fn replication_seed(master: u64, n_trajectories: usize, horizon: usize, rep: usize) -> u64 {
    let s = derive_seed(master, n_trajectories as u64);
    let s = derive_seed(s, horizon as u64);
    derive_seed(s, rep as u64)
}

/// Independent RNG stream for one trajectory of a dataset.
pub fn trajectory_rng(dataset_seed: u64, trajectory_index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(dataset_seed, trajectory_index))
}
