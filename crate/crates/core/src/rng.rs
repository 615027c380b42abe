//! Deterministic counter-based random numbers.
//!
//! The generator is SplitMix64: draw `k` (1-based) is
//! `mix(seed + k * 0x9E3779B97F4A7C15)` with the standard SplitMix64
//! finalizer. Reals in `[0, 1)` take the top 53 bits of a draw and scale
//! them by `2^-53`. Gaussians use the Box-Muller transform on two
//! consecutive uniforms. The whole stream is therefore reproducible
//! bit-for-bit on any platform and from any language.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derives an independent stream, e.g. one per experiment stage.
    pub fn fork(&mut self, tag: u64) -> RngStream {
        RngStream::new(self.next_u64() ^ mix(tag.wrapping_add(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform real in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform real in `[lo, hi)`.
    ///
    /// Panics when `lo >= hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo < hi, "contract violation: uniform bounds require lo < hi, got [{lo}, {hi})");
        let v = lo + (hi - lo) * self.next_f64();
        // Rounding in the affine map can land exactly on `hi`.
        if v >= hi {
            lo.max(hi - (hi - lo) * f64::EPSILON)
        } else {
            v
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi, "contract violation: int range requires lo <= hi, got [{lo}, {hi}]");
        let span = (hi - lo) as u64 + 1;
        lo + self.below(span) as i64
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "contract violation: below(0)");
        // Lemire's multiply-shift; bias is below 2^-64 * n and irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller, cosine branch only).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Samples an index from an unnormalized nonnegative weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0 && total.is_finite(), "contract violation: categorical weights sum to {total}");
        let mut r = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                return i;
            }
            r -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_splitmix64() {
        // Reference values of SplitMix64 seeded with 0 (state advanced before mixing).
        let mut rng = RngStream::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn unit_interval_range() {
        let mut rng = RngStream::new(7);
        for _ in 0..10_000 {
            let v = rng.uniform(0.0, 1.0);
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngStream::new(1234);
        let mut b = RngStream::new(1234);
        let xs: Vec<f64> = (0..1000).map(|_| a.uniform(0.0, 1.0)).collect();
        let ys: Vec<f64> = (0..1000).map(|_| b.uniform(0.0, 1.0)).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.counter(), 1000);
    }

    #[test]
    fn noise_bound_is_strict() {
        let mut rng = RngStream::new(99);
        for _ in 0..10_000 {
            assert!(rng.uniform(-0.0035, 0.0035).abs() < 0.0035);
        }
    }

    #[test]
    #[should_panic(expected = "lo < hi")]
    fn inverted_bounds_rejected() {
        RngStream::new(0).uniform(1.0, 1.0);
    }

    #[test]
    fn integers_cover_inclusive_range() {
        let mut rng = RngStream::new(3);
        let mut seen = [false; 6];
        for _ in 0..1000 {
            let n = rng.int_inclusive(5, 10);
            assert!((5..=10).contains(&n));
            seen[(n - 5) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(11);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
