//! Seeded, splittable PRNG behind every random decision in the crate.
//!
//! The generator is SplitMix64: 64 bits of state, one avalanche mix per
//! output. Substreams are derived by mixing a seed with a domain tag
//! (node name hash, video index, epoch number, ...), which makes each
//! consumer independent of how often the others draw. Runs replay
//! bit-identically for a given seed on every platform.

/// SplitMix64 generator (Steele, Lea & Flood's `splitmix64` finalizer).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller (cosine branch only, so one draw
    /// consumes exactly two uniforms and streams stay aligned).
    pub fn next_normal(&mut self) -> f64 {
        let u = 1.0 - self.next_f64(); // (0, 1]: ln stays finite
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    /// Uniform index in `[0, n)` via the 128-bit multiply-shift reduction.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Derive an independent substream seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    SplitMix64::new(seed ^ tag.rotate_left(17).wrapping_mul(GOLDEN_GAMMA)).next_u64()
}

/// FNV-1a over bytes; used to turn node names into stable stream tags.
/// (The std hasher is not guaranteed stable across releases.)
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01B3);
    }
    h
}
