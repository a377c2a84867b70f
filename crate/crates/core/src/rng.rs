//! Seeded random streams.
//!
//! Every run owns one seed. Components never share a generator; each one
//! derives its own ChaCha stream from `(seed, Substream)`, so adding draws in
//! one component cannot shift the numbers another component sees.
//!
//! | substream  | stream id | consumer                                   |
//! |------------|-----------|--------------------------------------------|
//! | `Corpus`   | 1         | archetype draws, utterances, split shuffle |
//! | `Init`     | 2         | parameter initialization, text features    |
//! | `Training` | 3         | batch selection, `t` and noise draws       |
//! | `Sampling` | 4         | terminal draws and reverse-step noise      |
//! | `Eval`     | 5         | evaluation subsets and baselines           |
//!
//! Worker `k` of a fanned-out job uses [`derive`] with an extra index, which
//! maps to stream `id + 16 * (k + 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substream {
    Corpus = 1,
    Init = 2,
    Training = 3,
    Sampling = 4,
    Eval = 5,
}

pub fn stream(seed: u64, sub: Substream) -> Rng {
    derive(seed, sub, None)
}

pub fn derive(seed: u64, sub: Substream, worker: Option<u64>) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = sub as u64 + worker.map_or(0, |k| 16 * (k + 1));
    rng.set_stream(id);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Stream positioned at block `index`, for draws that must not depend on how
/// many earlier blocks were consumed (e.g. a resumed training run).
pub fn at_index(seed: u64, sub: Substream, index: u64) -> Rng {
    let mut rng = stream(seed, sub);
    rng.set_word_pos(u128::from(index) << 32);
    rng
}
