//! Deterministic pseudo-random generation for synthetic data and fixtures.
//!
//! Everything random in this crate comes from SplitMix64, chosen because it
//! is trivial to reimplement bit-exactly in any language: one 64-bit adder
//! and a three-step finalizer, no data-dependent branches. The exact
//! constants are normative (see `FORMAT.md`) so golden fixtures can be
//! regenerated outside this crate.
//!
//! Floating-point derivation deliberately avoids transcendental functions:
//! uniform doubles come from the top 53 bits of the raw stream, and normal
//! deviates use the Irwin–Hall 12-sum, which needs only IEEE-754 addition.
//! Both are exactly reproducible on every platform with correctly rounded
//! f64 arithmetic (i.e. anything IEEE-conformant), unlike `ln`/`cos`-based
//! transforms whose libm implementations differ between systems.

/// Golden-ratio increment of the SplitMix64 state walk.
pub const SPLITMIX_INCREMENT: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: scrambles a state word into an output word.
///
/// This is the standard `mix64` from Steele et al.'s SplitMix construction;
/// the multiply constants are part of the normative format.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A SplitMix64 generator.
///
/// Distinct logical consumers (key tensor, value tensor, query vectors, …)
/// derive independent streams from one user-facing seed via
/// [`SplitMix64::stream`], so adding a new consumer never perturbs the
/// values an existing consumer sees.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    /// Generator whose state starts at `seed` itself.
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive the sub-stream `stream_id` of `seed`.
    ///
    /// The initial state is `mix64(seed ^ mix64(stream_id))`; both the
    /// seed and the stream id are scrambled so numerically close ids give
    /// uncorrelated streams.
    pub fn stream(seed: u64, stream_id: u64) -> Self {
        Self {
            state: mix64(seed ^ mix64(stream_id)),
        }
    }

    /// Next raw 64-bit output.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_INCREMENT);
        mix64(self.state)
    }

    /// Uniform double in `[0, 1)` from the top 53 bits of the stream.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform double in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Approximately standard-normal deviate via the Irwin–Hall 12-sum.
    ///
    /// The sum of 12 uniforms minus 6 has mean 0, variance exactly 1, and
    /// support [-6, 6]; the tails are truncated relative to a true
    /// Gaussian, which is irrelevant for synthetic activations and buys
    /// bit-exact cross-platform reproducibility.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let mut acc = 0.0f64;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }

    /// Uniform integer in `[0, n)` via rejection sampling (no modulo bias).
    ///
    /// # Panics
    /// Panics if `n` is zero.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        if n.is_power_of_two() {
            return self.next_u64() & (n - 1);
        }
        // Largest multiple of n that fits in u64; values at or above it
        // would bias the low residues, so reject and redraw.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }
}
