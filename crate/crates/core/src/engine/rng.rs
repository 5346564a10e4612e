//! Named, independently seeded random streams.
//!
//! Every stochastic component draws from its own stream, derived from the run
//! seed and a label, so adding or removing a component never shifts the draws
//! seen by the others.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type SimRng = Pcg64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, label: &str) -> SimRng {
        SimRng::seed_from_u64(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
