//! Reproducible random substreams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 keystream
//! selected by a root seed plus a short path of indices (replicate, chunk,
//! atom, ...). ChaCha is counter based, so a substream is fully determined by
//! its key and stream id and never depends on which thread consumes it or in
//! which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Tags separating substreams that share a root seed but serve different
/// purposes.
pub mod tag {
    pub const ENSEMBLE: u64 = 0x454e_5345_4d42_4c45;
    pub const SERIES_ARRIVALS: u64 = 0x4152_5249_5641_4c53;
    pub const SERIES_ATOM: u64 = 0x5345_5249_4553_4154;
    pub const TILTED_MC: u64 = 0x5449_4c54_4544_4d43;
    pub const CHECK: u64 = 0x4348_4543_4b53_5542;
    pub const LIMIT: u64 = 0x4c49_4d49_5453_414d;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root of a family of substreams.
#[derive(Debug, Clone)]
pub struct StreamFamily {
    seed: u64,
    key: [u8; 32],
}

impl StreamFamily {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for word in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            word.copy_from_slice(&state.to_le_bytes());
        }
        Self { seed, key }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the substream addressed by `path`.
    pub fn stream(&self, path: &[u64]) -> SimRng {
        let mut id = 0x6a09_e667_f3bc_c908u64;
        for &p in path {
            id = splitmix64(id ^ splitmix64(p));
        }
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(id);
        rng
    }
}

impl StreamFamily {
    /// Root seed for an independent family, drawn from the substream `path`.
    pub fn sub_seed(&self, path: &[u64]) -> u64 {
        use rand::RngCore;
        self.stream(path).next_u64()
    }
}

/// Fresh seed from OS entropy, used when a configuration omits one.
pub fn entropy_seed() -> u64 {
    rand::random()
}
