//! Seed discipline.
//!
//! Every random quantity is drawn from a ChaCha8 generator whose 64-bit seed
//! is derived from `(master seed, stream, index)` by chaining SplitMix64:
//!
//! ```text
//! h0 = splitmix64(master)
//! h1 = splitmix64(h0 ^ stream_id)
//! seed = splitmix64(h1 ^ index)
//! ```
//!
//! Components (concept bank, model init, training data, held-out data, ...)
//! use distinct stream ids, so any one of them can be varied without
//! perturbing the others. ChaCha8 and SplitMix64 are fully specified
//! algorithms, which keeps results identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Named substreams fanned out from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Bank = 1,
    Probabilities = 2,
    Init = 3,
    Data = 4,
    Heldout = 5,
    Stitch = 6,
    Corpus = 7,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let h0 = splitmix64(master);
    let h1 = splitmix64(h0 ^ stream as u64);
    splitmix64(h1 ^ index)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Standard normal draw, always sampled in `f64` so the stream does not
/// depend on the scalar type of the consumer.
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
