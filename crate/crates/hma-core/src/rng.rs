//! Counter-based stream seeding for reproducible parallel simulation.
//!
//! Each Monte Carlo replicate gets its own ChaCha stream whose seed is a
//! SplitMix64 hash of `(base_seed, counter)`. Streams are therefore
//! independent of scheduling order: replicate 17 draws the same numbers
//! whether it runs first, last, or on another thread.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One SplitMix64 step: advances the state and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the stream seed for `counter` under `base_seed`.
pub fn counter_rng_seed(base_seed: u64, counter: u64) -> u64 {
    let mut state = base_seed;
    let salt = splitmix64(&mut state);
    let mut mixed = salt ^ counter.wrapping_mul(0xA24B_AED4_963E_E407);
    splitmix64(&mut mixed)
}

/// ChaCha stream for one `(base_seed, counter)` pair.
pub fn stream_rng(base_seed: u64, counter: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(counter_rng_seed(base_seed, counter))
}
