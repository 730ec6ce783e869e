//! Seed plumbing. Every stochastic component takes an explicit `u64` seed and
//! builds its own ChaCha stream, so results do not depend on call order
//! across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a stream tag
/// (splitmix64 finalizer over the pair).
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_differ_and_repeat() {
        assert_ne!(derive(7, 1), derive(7, 2));
        assert_eq!(derive(7, 1), derive(7, 1));
        let a: Vec<u32> = from_seed(3).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u32> = from_seed(3).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a, b);
    }
}
