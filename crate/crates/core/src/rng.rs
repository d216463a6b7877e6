//! Deterministic random substreams keyed by tuples such as
//! `(master_seed, canvas, stage, slot, attempt)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::canvas::TokenId;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(master: u64) -> Self {
        Self(splitmix64(master))
    }

    #[must_use]
    pub fn with(self, part: u64) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(part.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

pub fn mix_tokens(tokens: &[TokenId]) -> u64 {
    tokens
        .iter()
        .fold(SeedKey::new(tokens.len() as u64), |k, &t| k.with(t as u64))
        .finish()
}

/// Map a hash to `[0, 1)`.
pub fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}
