use crate::error::{CoreError, Result};

/// Weyl increment of the SplitMix64 generator (2^64 / phi, odd).
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output mixer.
#[inline(always)]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based deterministic PRNG (SplitMix64).
///
/// The state is a `(seed, counter)` pair; draw `n` is a pure function of
/// both, so identical seeds give identical streams and streams can be forked
/// for parallel workers without coordination. Forking hashes
/// `(seed, worker_id)` into a fresh seed so child streams are decorrelated
/// from each other and from the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed: mix(seed.wrapping_add(GAMMA)), counter: 0 }
    }

    /// Independent deterministic child stream for `worker_id`.
    pub fn fork(&self, worker_id: u64) -> Rng {
        let child = mix(self.seed ^ mix(worker_id.wrapping_add(GAMMA).wrapping_mul(GAMMA)));
        Rng { seed: child, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi). Errors when `lo >= hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) {
            return Err(CoreError::parameter(alloc::format!(
                "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
            )));
        }
        Ok(lo + (hi - lo) * self.next_f64())
    }

    /// Uniform integer in [0, n). `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 64-bit multiply-shift; bias is < 2^-53 for any n we use.
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    #[inline]
    pub fn coin(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = self.next_f64();
            if u > 0.0 {
                let v = self.next_f64();
                let r = (-2.0 * u.ln()).sqrt();
                return r * libm::cos(2.0 * core::f64::consts::PI * v);
            }
        }
    }

    /// Normal truncated to [-2s, 2s] by resampling (ViT weight init).
    pub fn trunc_normal(&mut self, s: f64) -> f64 {
        loop {
            let x = self.normal() * s;
            if x.abs() <= 2.0 * s {
                return x;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Draw an index from non-negative weights (need not be normalized).
    pub fn weighted(&mut self, weights: &[f64]) -> Result<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(CoreError::parameter("weighted draw needs non-negative weights with positive sum"));
        }
        let mut u = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return Ok(i);
            }
        }
        Ok(weights.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_differ_from_parent_and_each_other() {
        let root = Rng::new(7);
        let mut f0 = root.fork(0);
        let mut f1 = root.fork(1);
        let mut parent = root.clone();
        let s0: alloc::vec::Vec<u64> = (0..8).map(|_| f0.next_u64()).collect();
        let s1: alloc::vec::Vec<u64> = (0..8).map(|_| f1.next_u64()).collect();
        let sp: alloc::vec::Vec<u64> = (0..8).map(|_| parent.next_u64()).collect();
        assert_ne!(s0, s1);
        assert_ne!(s0, sp);
        assert_ne!(s1, sp);
        // forking is stable
        let mut f0b = root.fork(0);
        assert_eq!(s0[0], f0b.next_u64());
    }

    #[test]
    fn uniform_mean_over_million_draws() {
        let mut rng = Rng::new(123);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += rng.next_f64();
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn uniform_rejects_bad_bounds() {
        let mut rng = Rng::new(1);
        assert!(rng.uniform(1.0, 1.0).is_err());
        assert!(rng.uniform(2.0, 1.0).is_err());
        let x = rng.uniform(-1.0, 3.0).unwrap();
        assert!((-1.0..3.0).contains(&x));
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(5);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            s1 += x;
            s2 += x * x;
        }
        assert!((s1 / n as f64).abs() < 0.01);
        assert!((s2 / n as f64 - 1.0).abs() < 0.02);
    }
}
