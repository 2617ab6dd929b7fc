//! Keyed, splittable random streams.
//!
//! Every consumer derives its own ChaCha stream from
//! (master_seed, purpose_tag, replication_index), so replications are
//! reproducible independently of execution order and thread scheduling,
//! and adding a consumer never perturbs the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xCBF29CE484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

/// Derives a deterministic stream for the given key.
pub fn stream(master_seed: u64, purpose_tag: &str, rep_index: u64) -> ChaCha8Rng {
    let mut state = master_seed
        ^ hash_tag(purpose_tag).rotate_left(17)
        ^ rep_index.wrapping_mul(0xD1342543DE82EF95);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
