//! Seeded SplitMix64 generator used for every random draw in the crate.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

/// Bit-reproducible pseudo-random stream.
///
/// Uniform doubles take the top 53 bits of each 64-bit output.
#[derive(Clone, Debug)]
pub struct Prng(SplitMix64);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng(SplitMix64::seed_from_u64(seed))
    }

    /// Independent stream keyed by `(seed, stream)`; used to keep e.g.
    /// evaluation scenes disjoint from training scenes.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut mixer = SplitMix64::seed_from_u64(stream ^ 0x6a09_e667_f3bc_c909);
        Prng::new(seed ^ mixer.next_u64())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        self.0.random_range(0..bound)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Direct access for `rand` helpers such as shuffling.
    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.0
    }
}
