//! Deterministic pseudo-random numbers for initialization, augmentation,
//! and the synthetic corpus.
//!
//! xoshiro256++ with a splitmix64 seeder. The four-word state is exposed
//! so checkpoints can round-trip it bitwise; draws are identical on every
//! platform.

use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Xoshiro {
    s: [u64; 4],
}

impl Xoshiro {
    pub fn seeded(seed: u64) -> Self {
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Xoshiro {
            s: [next(), next(), next(), next()],
        }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Xoshiro { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform<S: Scalar>(&mut self, lo: S, hi: S) -> S {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + S::from_f64(u) * (hi - lo)
    }

    /// Uniform integer in `[0, n)`. Modulo bias is ~n/2^64, irrelevant at
    /// the corpus sizes used here.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}
