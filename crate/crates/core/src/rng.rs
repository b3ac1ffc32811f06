//! Counter-based random streams.
//!
//! Every Monte Carlo quantity in the crate draws from a stream identified by
//! `(master seed, domain, index)`. The key of a ChaCha8 generator is derived
//! from the master seed and the domain tag with SplitMix64; the trial index
//! selects the ChaCha stream. Adding trials therefore never perturbs the
//! randomness seen by earlier trials, and trials can run on any thread in any
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Domain tags. Distinct subsystems never share a stream.
pub mod domain {
    pub const FADING: u64 = 0x01;
    pub const SNR_CDF: u64 = 0x02;
    pub const AWGN: u64 = 0x10;
    pub const INFO_BITS: u64 = 0x11;
    pub const BLER_TRIAL: u64 = 0x12;
    pub const CODE_CONSTRUCTION: u64 = 0x13;
    pub const ERASURE: u64 = 0x20;
    pub const BLOCK_SNR: u64 = 0x21;
    pub const PHY_BLOCK: u64 = 0x22;
    pub const DATASET: u64 = 0x30;
    pub const PLANNER_TRIAL: u64 = 0x31;
    pub const PROJECTION: u64 = 0x32;
    pub const DIFFUSION: u64 = 0x40;
    pub const LORA_INIT: u64 = 0x41;
    pub const LORA_TRAIN: u64 = 0x42;
    pub const SAMPLER: u64 = 0x43;
    pub const E2E: u64 = 0x50;
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A master seed from which independent streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    /// Generator for trial `index` of `domain`.
    pub fn rng(&self, domain: u64, index: u64) -> StreamRng {
        let key = splitmix64(self.seed ^ splitmix64(domain));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        rng
    }

    /// A nested family of streams, e.g. per-block streams inside a trial.
    pub fn child(&self, domain: u64, index: u64) -> Streams {
        let a = splitmix64(self.seed ^ splitmix64(domain.rotate_left(17)));
        Streams::new(splitmix64(a ^ splitmix64(index.wrapping_add(0xA5A5_A5A5))))
    }
}

/// Shorthand for `Streams::new(seed).rng(domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    Streams::new(seed).rng(domain, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = stream(7, domain::AWGN, 3);
        let mut b = stream(7, domain::AWGN, 3);
        let mut c = stream(7, domain::AWGN, 4);
        let mut d = stream(7, domain::FADING, 3);
        let xa: u64 = a.random();
        assert_eq!(xa, b.random::<u64>());
        assert_ne!(xa, c.random::<u64>());
        assert_ne!(xa, d.random::<u64>());
    }

    #[test]
    fn children_differ_from_parent() {
        let s = Streams::new(1);
        assert_ne!(s.child(domain::ERASURE, 0), s);
        assert_ne!(s.child(domain::ERASURE, 0), s.child(domain::ERASURE, 1));
        assert_eq!(s.child(domain::ERASURE, 5), s.child(domain::ERASURE, 5));
    }
}
