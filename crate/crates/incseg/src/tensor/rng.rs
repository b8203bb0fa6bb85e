//! Seeded random state with derivable substreams.
//!
//! Everything stochastic in the crate (init, shuffling, scene synthesis)
//! draws from an [`RngState`], so a run is a pure function of its seeds.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Scalar;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream. `substream(i)` derives an independent
/// stream from the seed alone, so callers can hand out per-item streams
/// (one per dataset sample, one per domain) without consuming this one.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by (seed, index); does not advance `self`.
    pub fn substream(&self, index: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo < hi);
        self.rng.gen_range(lo..hi)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        mean + std * z
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Fill a buffer with zero-mean gaussian draws of the given std.
    pub fn fill_normal<S: Scalar>(&mut self, out: &mut [S], std: f64) {
        for v in out.iter_mut() {
            *v = S::from_f64(self.normal(0.0, std));
        }
    }
}
