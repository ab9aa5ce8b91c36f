//! Seeded permutations.
//!
//! Both levels use ChaCha8 seeded with `seed_from_u64(seed)`. Shard order
//! draws from stream 0; records inside the shard that started at position
//! `i` draw from stream `i + 1`. Each draw picks `j = (next_u64 * (i + 1)) >> 64`
//! while walking `i` from the last position down to 1, then swaps `i` and `j`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Shard;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        items.swap(i, j);
    }
}

/// Permutes shard order, then record order within every shard.
pub fn hierarchical_shuffle(mut shards: Vec<Shard>, seed: u64) -> Vec<Shard> {
    for (i, shard) in shards.iter_mut().enumerate() {
        fisher_yates(&mut shard.records, &mut stream_rng(seed, i as u64 + 1));
    }
    fisher_yates(&mut shards, &mut stream_rng(seed, 0));
    shards
}
