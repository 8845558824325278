//! Seed plumbing. Every stochastic operation takes an explicit `u64` seed and
//! builds its own ChaCha8 stream, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(tag, index)` under a root seed, e.g. one per data worker.
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(tag)) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Stateless uniform value in `[0, 1)` keyed by three integers.
#[inline]
pub fn hash_unit(seed: u64, a: u64, b: u64) -> f32 {
    let h = splitmix64(seed ^ splitmix64(a ^ splitmix64(b)));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
