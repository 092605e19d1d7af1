//! Input generators shared by the benchmarks.

use hashparse::ScoreTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` score table of `bits` tables over `n` positions.
pub fn random_table(bits: usize, n: usize, seed: u64) -> ScoreTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..bits * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ScoreTable::from_scores(bits, n, scores)
}

/// Random token ids in `2..vocab`.
pub fn random_ids(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(2..vocab as u32)).collect()
}
