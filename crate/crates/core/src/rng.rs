//! Seed plumbing. Every stochastic stage draws from its own ChaCha stream
//! derived from the run seed, so stages can be rerun in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for a named stage and stream index.
pub fn derive_seed(seed: u64, stage: &str, stream: u64) -> u64 {
    let mut h = mix(seed);
    for b in stage.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ stream)
}

pub fn stage_rng(seed: u64, stage: &str, stream: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(1, "vae", 0), derive_seed(1, "vae", 1));
        assert_ne!(derive_seed(1, "vae", 0), derive_seed(1, "fp", 0));
        assert_eq!(derive_seed(7, "split", 3), derive_seed(7, "split", 3));
    }
}
