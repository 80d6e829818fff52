//! Reproducible random streams.
//!
//! Every consumer draws from a ChaCha8 generator. The 256-bit key is expanded
//! from `splitmix64(seed ^ domain)` and the 64-bit ChaCha stream id selects the
//! substream (sample index, epoch, replica, ...). ChaCha is counter-based, so
//! the output is identical on every platform and independent of how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the key space of different consumers sharing one user seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Microstructure = 0x6d69_6372_6f73_7472,
    FnoInit = 0x666e_6f5f_696e_6974,
    Shuffle = 0x7368_7566_666c_6521,
}

/// Reserved stream id for the shared Voronoi geometry.
pub const GEOMETRY_STREAM: u64 = u64::MAX;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ domain as u64;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
