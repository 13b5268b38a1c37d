//! Seed handling.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream that is
//! addressed by `(master seed, domain, index)`. The domain separates unrelated
//! consumers (parameter draws, field simulation, augmentation, latent noise),
//! and the index selects the ChaCha stream, so replicate `i` sees the same
//! numbers no matter which thread or in which order it is generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Named consumers of randomness.
pub mod domain {
    pub const PRIOR: u64 = 1;
    pub const FIELD: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const MONTE_CARLO: u64 = 7;
    pub const ABC: u64 = 8;
    pub const MULTISTART: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
    pub const TEST_SET: u64 = 11;
    pub const VALIDATION: u64 = 12;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with a domain tag into a new 64-bit key.
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    splitmix64(seed ^ splitmix64(domain.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

/// Independent generator for replicate `index` of `domain` under `seed`.
pub fn substream(seed: u64, domain: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain));
    rng.set_stream(index);
    rng
}

pub fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn std_exp(rng: &mut Rng) -> f64 {
    Exp1.sample(rng)
}
