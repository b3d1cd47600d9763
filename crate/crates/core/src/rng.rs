//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream derived
//! from `(seed, stream id)`, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Stream `id` of the generator family keyed by `seed`.
pub fn stream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mixes a label into a seed so that sibling consumers (data, init, shuffle)
/// of one user seed get unrelated streams.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
