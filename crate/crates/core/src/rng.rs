//! Seeded random-stream derivation.
//!
//! Every stochastic component (data generation, window sampling, batch
//! composition, parameter init, dropout) draws from its own named stream so
//! that runs are reproducible bit-for-bit and independent streams can be
//! consumed concurrently. A stream is a ChaCha12 generator keyed by the
//! master seed plus an FNV-1a hash of the stream label.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the deterministic generator for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha12Rng {
    let key = mix(seed ^ fnv1a(label.as_bytes()));
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(key.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha12Rng::from_seed(bytes)
}

/// Derive a sub-seed, e.g. for handing a child component its own seed space.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    mix(seed ^ fnv1a(label.as_bytes()))
}
