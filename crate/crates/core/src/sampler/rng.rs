//! Deterministic random streams keyed by `(seed, sweep, slot)`, so a sweep
//! gives the same draws whether subjects are updated serially or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Population-level Gibbs updates.
pub(crate) const SLOT_POPULATION: u64 = 0;
/// Joint translation move.
pub(crate) const SLOT_RECENTRE: u64 = 1;
/// Subject `i` draws from slot `SLOT_SUBJECT0 + i`.
pub(crate) const SLOT_SUBJECT0: u64 = 2;

const SLOT_BITS: u32 = 24;

/// SplitMix64 finalizer; used to derive independent seeds from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream(seed: u64, sweep: usize, slot: u64) -> ChaCha8Rng {
    debug_assert!(slot < 1 << SLOT_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sweep as u64) << SLOT_BITS) | slot);
    rng
}
