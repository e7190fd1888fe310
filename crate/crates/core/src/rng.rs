//! Seeded randomness.
//!
//! Every random draw in the toolkit goes through ChaCha8 seeded from a `u64`
//! via `SeedableRng::seed_from_u64`. ChaCha is a counter-based stream cipher
//! whose output is identical on every platform, so a fixed seed reproduces
//! subsamples, k-means initialisations and probe shuffles bit-for-bit.
//! Parallel work uses independent streams of the same key so that results
//! never depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the `stream`-th independent substream of `seed`.
pub fn substream(seed: u64, stream: u64) -> Prng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform index in `0..n` drawn through a `u64` range so the value does not
/// depend on the platform's pointer width.
pub(crate) fn index(rng: &mut Prng, n: usize) -> usize {
    rng.random_range(0..n as u64) as usize
}

/// `n` distinct indices from `0..total`, returned in ascending order.
///
/// Partial Fisher–Yates over `0..total`; only the first `n` swaps are made.
pub fn sample_indices(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..total).collect();
    let mut rng = seeded(seed);
    for i in 0..n.min(total) {
        let j = i + index(&mut rng, total - i);
        pool.swap(i, j);
    }
    pool.truncate(n.min(total));
    pool.sort_unstable();
    pool
}

pub(crate) fn shuffle(rng: &mut Prng, items: &mut [usize]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
