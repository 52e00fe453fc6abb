//! Seed derivation.
//!
//! A run has one master seed. Every component (environment noise, network
//! initialization, topology rules, teacher sampling, evaluation, ...) draws
//! from its own named substream, derived from the master seed with a
//! counter-based mix. Adding or removing draws in one substream never shifts
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for substream `name` with counter `index` under `master`.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    let a = splitmix64(master ^ fnv1a(name));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(master: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name, index))
}
