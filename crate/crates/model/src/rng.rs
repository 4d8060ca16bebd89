//! Seeded 64-bit sequence generator (splitmix-style) used for synthetic
//! model weights, randomness tapes, and test-suite generation. The update is
//! fixed so generated artifacts are reproducible across implementations:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in 0..bound (bound > 0), by modulo reduction. The slight
    /// modulo bias is irrelevant here; determinism is what matters.
    pub fn below(&mut self, bound: u64) -> u64 {
        self.next_u64() % bound
    }

    /// Uniform raw fixed-point value in [-1.0, 1.0] for the given number of
    /// fractional bits.
    pub fn unit_raw(&mut self, frac_bits: u32) -> i32 {
        let scale = 1i64 << frac_bits;
        (self.below((2 * scale + 1) as u64) as i64 - scale) as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_sequence() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn unit_raw_in_range() {
        let mut r = SplitMix64::new(7);
        for _ in 0..1000 {
            let v = r.unit_raw(16);
            assert!((-65536..=65536).contains(&v));
        }
    }
}
