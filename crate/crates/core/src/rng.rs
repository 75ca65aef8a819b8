//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer of randomness (grid sampling, weight generation, triple
//! sampling, ...) asks for its own stream by name, so adding a new consumer
//! never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The stream called `name` under `master`.
pub fn stream(master: u64, name: &str) -> StreamRng {
    substream(master, name, 0)
}

/// The `index`-th member of the family of streams called `name`.
pub fn substream(master: u64, name: &str, index: u64) -> StreamRng {
    let seed = splitmix64(master ^ splitmix64(index.wrapping_add(0x5151)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// A derived 64-bit seed, for APIs that take a plain seed.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(name)) ^ index)
}
