//! The normative pseudo-random generator.
//!
//! Random chunk plans and processor seeding must reproduce bit-for-bit across
//! processes, platforms and implementations in other languages, so the
//! generator and the way it is reduced to a bounded index are fixed here:
//!
//! * SplitMix64: `state += 0x9E3779B97F4A7C15`, then the standard
//!   xor-shift-multiply finalizer.
//! * Bounded draw in `[0, n)`: the high 64 bits of the 128-bit product
//!   `next_u64() * n` (no rejection step).
//! * Fisher–Yates: for `i` from `n - 1` down to `1`, swap `i` with a bounded
//!   draw in `[0, i]`.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform-ish index in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Float in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
