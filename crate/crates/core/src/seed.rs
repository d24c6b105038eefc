//! Seed derivation. Every random stream in a run is keyed by the experiment
//! seed plus a purpose tag and coordinates (round, client), so results do not
//! depend on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_DATA: u64 = 0x4441_5441;
pub const TAG_INIT: u64 = 0x494e_4954;
pub const TAG_SAMPLE: u64 = 0x5341_4d50;
pub const TAG_TRAIN: u64 = 0x5452_4e00;
pub const TAG_PARTITION: u64 = 0x5041_5254;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
