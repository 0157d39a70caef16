//! Seeded, platform-stable randomness.
//!
//! Every stochastic component (synthetic data, augmentation, weight init,
//! dropout, batch shuffling) draws from a ChaCha8 stream keyed by a root
//! seed plus a stream label. ChaCha8 is a counter-based generator, so the
//! same (seed, label) pair yields the same bit stream on every platform,
//! and resuming a run never needs serialized RNG state: streams are
//! re-derived from (seed, iteration) counters. Floating-point draws are
//! built from raw 64-bit integers, never from platform-dependent
//! distribution code.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// splitmix64 step; used only to expand a seed + label into a ChaCha key.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-stream generator.
#[derive(Debug, Clone)]
pub struct SubRng {
    inner: ChaCha8Rng,
}

impl SubRng {
    /// Derive an independent stream from a root seed and a label path,
    /// e.g. `SubRng::derive(seed, &[STREAM_AUGMENT, iteration, slot])`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut state = seed ^ 0x6c70_6d5f_7365_6564; // "lpm_seed"
        let mut key = [0u8; 32];
        for &word in path {
            let mut w = word ^ 0xa076_1d64_78bd_642f;
            state ^= splitmix64(&mut w);
            // advance so that [a, b] and [b, a] derive different keys
            splitmix64(&mut state);
        }
        let mut s = state;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        SubRng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1): top 53 bits of a u64, identical everywhere.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit_f64() < p
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn range_usize(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + self.below(hi_inclusive - lo + 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stream labels. Keeping them in one place avoids accidental collisions.
pub mod streams {
    pub const PARAM_INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const BENCH_INPUT: u64 = 6;
}

/// Stable 64-bit hash of a string label (FNV-1a), for keying parameter
/// streams by tensor name.
pub fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic() {
        let mut a = SubRng::derive(7, &[1, 2, 3]);
        let mut b = SubRng::derive(7, &[1, 2, 3]);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_paths_decorrelate() {
        let mut a = SubRng::derive(7, &[1, 2, 3]);
        let mut b = SubRng::derive(7, &[1, 2, 4]);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn unit_f64_in_range() {
        let mut r = SubRng::derive(3, &[9]);
        for _ in 0..1000 {
            let v = r.unit_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = SubRng::derive(11, &[0]);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
