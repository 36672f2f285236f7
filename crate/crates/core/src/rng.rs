//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (data split, initialization, dropout,
//! sampling) asks for its own stream by name plus a list of integer
//! coordinates (epoch, batch, ...). Streams are independent of the order in
//! which they are requested, so components stay reproducible in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic generator for `name` at the given coordinates.
    pub fn derive(&self, name: &str, coords: &[u64]) -> StreamRng {
        // FNV-1a over the name, then fold in the coordinates.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut state = splitmix(self.seed ^ splitmix(h));
        for &c in coords {
            state = splitmix(state ^ splitmix(c.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        ChaCha8Rng::seed_from_u64(state)
    }
}
