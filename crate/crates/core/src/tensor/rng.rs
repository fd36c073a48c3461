use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Seeded, platform-independent random source.
///
/// The bit stream comes from ChaCha8 keyed by the 64-bit seed, uniforms take
/// the top 53 bits of each word, and normals use the Box–Muller transform on
/// consecutive uniform pairs. All three pieces are pinned, so a seed names the
/// same sample sequence everywhere.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-stream of this seed.
    pub fn substream(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One standard normal pair from Box–Muller.
    pub fn standard_normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.standard_normal_pair().0
    }

    /// Emits `count` standard normals, consuming `ceil(count / 2)` pairs.
    pub(crate) fn fill_standard_normal(&mut self, count: usize, mut sink: impl FnMut(f64)) {
        let mut left = count;
        while left > 0 {
            let (a, b) = self.standard_normal_pair();
            sink(a);
            left -= 1;
            if left > 0 {
                sink(b);
                left -= 1;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_first_words() {
        // Freezes the generator choice; a change here changes every experiment.
        let mut a = Rng::new(0);
        let mut b = Rng::new(0);
        let first: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let again: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(first, again);
        assert_ne!(first[0], Rng::new(1).next_u64());
    }

    #[test]
    fn substreams_differ() {
        let base = Rng::new(7);
        let mut s0 = base.substream(0);
        let mut s1 = base.substream(1);
        assert_ne!(s0.next_u64(), s1.next_u64());
    }

    #[test]
    fn below_in_range_and_permutation_complete() {
        let mut rng = Rng::new(1);
        for n in 1..50 {
            assert!(rng.below(n) < n);
        }
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(2);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
