//! Seeded randomness with a fixed, documented construction.
//!
//! Every random stream is a ChaCha8 generator seeded through
//! `SeedableRng::seed_from_u64`. Bounded integers use Lemire's
//! multiply-and-reject method over `next_u64`, uniform reals take the top 53
//! bits of `next_u64`, and shuffles are Fisher-Yates from the last index
//! down. None of these depend on the `rand` crate's internal sampling
//! routines, so another implementation of ChaCha8 reproduces the streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform integer in `0..bound`.
pub fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "empty range");
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let product = u128::from(rng.next_u64()) * u128::from(bound);
        if (product as u64) >= threshold {
            return (product >> 64) as u64;
        }
    }
}

/// Uniform real in `[0, 1)`.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// The seed of rollout `rollout_index` for one coalition of one episode:
/// the first 8 bytes (little-endian) of
/// `SHA-256(base_seed_le8 || len(episode_id)_le8 || episode_id || mask_le8 || rollout_index_le4)`.
pub fn rollout_seed(base_seed: u64, episode_id: &str, mask: u64, rollout_index: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    hasher.update((episode_id.len() as u64).to_le_bytes());
    hasher.update(episode_id.as_bytes());
    hasher.update(mask.to_le_bytes());
    hasher.update(rollout_index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Derives an independent stream seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
