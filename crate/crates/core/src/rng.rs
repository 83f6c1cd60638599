//! Deterministic splitmix64 stream used for every frozen weight.
//!
//! The mapping from `u64` to `f32` keeps the top 24 bits so the same stream
//! yields bit-identical floats on every platform.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) / (1u32 << 24) as f32
    }

    /// Uniform in `[-bound, bound]`.
    pub fn next_symmetric(&mut self, bound: f32) -> f32 {
        (2.0 * self.next_unit_f32() - 1.0) * bound
    }
}

/// The splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` uniform values in `[0, 1)` drawn from the splitmix64 stream of `seed`.
pub fn seeded_uniform(seed: u64, count: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    (0..count).map(|_| rng.next_unit_f32()).collect()
}

/// `count` weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn seeded_weights(seed: u64, count: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let mut rng = SplitMix64::new(seed);
    (0..count).map(|_| rng.next_symmetric(bound)).collect()
}

/// 64-bit FNV-1a, used to derive per-token seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Sub-seed for a named stream derived from a root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    mix64(root ^ fnv1a64(label.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_vectors() {
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn unit_mapping_uses_top_bits() {
        let x = 0xE220_A839_7B1D_CDAFu64;
        let expected = ((x >> 40) as f32) / 16_777_216.0;
        assert_eq!(seeded_uniform(0, 1)[0], expected);
    }

    #[test]
    fn stream_is_deterministic() {
        assert_eq!(seeded_uniform(1234, 64), seeded_uniform(1234, 64));
        assert_ne!(seeded_uniform(1234, 8), seeded_uniform(1235, 8));
    }

    #[test]
    fn weights_respect_bound() {
        let d = 32;
        let bound = 1.0 / (d as f32).sqrt();
        let w = seeded_weights(7, 10_000, d);
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| *v < 0.0) && w.iter().any(|v| *v > 0.0));
    }
}
