//! Seeded pseudo-random numbers for synthetic weights.
//!
//! A SplitMix64 stream per tensor keeps generation deterministic and
//! independent of sampling order: resampling one tensor never shifts the
//! values of any other. The generator is pinned here (rather than taken
//! from a crate) so that saved models stay bit-identical across builds.

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Derive an independent stream from a seed and a list of stream labels
    /// (layer index, tensor slot, retry counter, ...).
    pub fn for_stream(seed: u64, labels: &[u64]) -> Self {
        let mut mixed = seed;
        for &label in labels {
            // run the label through one splitmix step so nearby labels decorrelate
            mixed = split_step(mixed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        split_step(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        // take the top 53 bits; exactly representable in an f64 mantissa
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u in (0, 1] keeps the log argument away from zero
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Normal with mean 0 and the given standard deviation.
    pub fn next_normal_scaled(&mut self, std_dev: f64) -> f64 {
        self.next_normal() * std_dev
    }
}

fn split_step(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut ra = SplitMix64::new(42);
        let mut rb = SplitMix64::new(42);
        let a: Vec<u64> = (0..8).map(|_| ra.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| rb.next_u64()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_with_different_labels_diverge() {
        let mut a = SplitMix64::for_stream(7, &[0, 1]);
        let mut b = SplitMix64::for_stream(7, &[0, 2]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = SplitMix64::new(123);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = SplitMix64::new(9);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
    }
}
