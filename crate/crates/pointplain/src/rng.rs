//! Portable counter-based random number generator.
//!
//! Every stochastic piece of the pipeline (scene synthesis, augmentation,
//! patch partitioning, dropout, parameter init) draws from this generator so
//! that runs are reproducible from a single seed and independent of any
//! platform RNG. The design is a keyed SplitMix-style counter hash: the
//! stream is a pure function of `(key, counter)`, and [`Rng::split`] derives
//! statistically independent child streams without consuming state from the
//! parent.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer. Bijective, well-mixed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed),
            counter: 0,
        }
    }

    /// Derives an independent child stream. Pure in the parent: the same
    /// `(parent, stream)` pair always yields the same child, regardless of
    /// how many values the parent has produced.
    pub fn split(&self, stream: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(stream)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Approximately standard-normal deviate (Irwin-Hall sum of 12
    /// uniforms). Chosen over Box-Muller to keep the stream free of
    /// transcendental libm calls; tails clip at ±6, which is irrelevant for
    /// jitter and init use.
    pub fn normal(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_pure_in_parent() {
        let parent = Rng::new(3);
        let mut c1 = parent.split(42);
        let mut advanced = parent.clone();
        advanced.next_u64();
        let mut c2 = advanced.split(42);
        for _ in 0..16 {
            assert_eq!(c1.next_u64(), c2.next_u64());
        }
    }

    #[test]
    fn splits_differ_by_stream() {
        let parent = Rng::new(3);
        assert_ne!(parent.split(0).next_u64(), parent.split(1).next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_is_roughly_standard() {
        let mut rng = Rng::new(5);
        let n = 20_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            s += x;
            ss += x * x;
        }
        let mean = s / n as f64;
        let var = ss / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(9);
        let mut xs: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
