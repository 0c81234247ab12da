//! Seeded, platform-independent random streams.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by the golden-ratio
//! increment `0x9E37_79B9_7F4A_7C15`, whose value is passed through the
//! finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Every parameter tensor draws from its own stream, seeded by
//! [`derive_seed`] from the model seed and the tensor's checkpoint name, so
//! initialization does not depend on construction order.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    counter: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { counter: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(GOLDEN_GAMMA);
        mix64(self.counter)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviates via the Box-Muller transform; both outputs of
    /// each transform are returned.
    #[inline]
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        // 1 - u keeps the logarithm argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn next_normal(&mut self) -> f64 {
        self.next_normal_pair().0
    }

    /// Normal(0, std) restricted to `[-2 std, 2 std]` by rejection.
    pub fn next_truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let (a, b) = self.next_normal_pair();
            if a.abs() <= 2.0 {
                return a * std;
            }
            if b.abs() <= 2.0 {
                return b * std;
            }
        }
    }
}

impl SplitMix64 {
    /// Fills `out` with Normal(0, std) draws restricted to `[-2 std, 2 std]`,
    /// keeping both members of each Box-Muller pair that pass the bound.
    pub fn fill_truncated_normal(&mut self, out: &mut [f32], std: f64) {
        let mut i = 0;
        while i < out.len() {
            let (a, b) = self.next_normal_pair();
            for z in [a, b] {
                if z.abs() <= 2.0 && i < out.len() {
                    out[i] = (z * std) as f32;
                    i += 1;
                }
            }
        }
    }
}

/// Mixes a base seed with a label (FNV-1a over the UTF-8 bytes).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(seed ^ mix64(h))
}
