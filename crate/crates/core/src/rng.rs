//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(seed, stream, index)`: there is no
//! mutable state, so the value a patient or Monte Carlo sample receives does
//! not depend on evaluation order, thread schedule or how many other draws
//! happened before it. The mixer is the SplitMix64 finalizer applied to a
//! Weyl-sequence combination of the three words.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless generator keyed by a 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub const fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit word for `(stream, index)`.
    pub fn word(&self, stream: u64, index: u64) -> u64 {
        let a = mix64(self.seed.wrapping_add(GOLDEN));
        let b = mix64(a ^ stream.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019));
        mix64(b ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93).wrapping_add(GOLDEN))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&self, stream: u64, index: u64) -> f64 {
        (self.word(stream, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`; safe to take logarithms of.
    pub fn open_uniform(&self, stream: u64, index: u64) -> f64 {
        ((self.word(stream, index) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Derive an independent generator, e.g. one per Monte Carlo sample.
    pub fn fork(&self, tag: u64) -> CounterRng {
        CounterRng::new(self.word(u64::MAX, tag))
    }

    /// Fisher-Yates shuffle driven by `stream`.
    pub fn shuffle<T>(&self, stream: u64, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.word(stream, i as u64) % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}
