//! Counter-based pseudo-random stream.
//!
//! Every random draw in the crate flows through [`RngStream`], a counter-based
//! generator built on the SplitMix64 finalizer: draw `i` of a stream seeded
//! with `s` is `mix64(s + i * GOLDEN_GAMMA)` where `mix64` is the
//! xor-shift/multiply finalizer from Steele et al.'s SplitMix64. The sequence
//! is a pure function of `(seed, counter)`, so identical seeds replay
//! identical draw sequences and a stream can be forked deterministically with
//! [`RngStream::split`].

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: bijective avalanche mix of a 64-bit word.
fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Deterministic random stream: a seed plus a draw counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Fork a child stream. The child's seed mixes the parent seed with the
    /// label, so distinct labels yield statistically independent streams and
    /// the parent's own sequence is unaffected.
    pub fn split(&self, label: u64) -> RngStream {
        RngStream::new(mix64(self.seed ^ mix64(label ^ GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform integer in `[0, bound)` by rejection.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        loop {
            let x = self.next_u64();
            let r = x % bound;
            // Reject draws from the final partial block of the 2^64 range.
            if x.wrapping_sub(r) <= u64::MAX - bound + 1 {
                return r;
            }
        }
    }

    /// Standard normal draw via Box-Muller (one value per pair of uniforms;
    /// the sine branch is discarded to keep the stream stateless beyond the
    /// counter).
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Choose `k` distinct elements uniformly without replacement
    /// (partial Fisher-Yates over a scratch copy).
    pub fn choose_k<T: Copy>(&mut self, xs: &[T], k: usize) -> Vec<T> {
        assert!(k <= xs.len(), "cannot choose {k} from {}", xs.len());
        let mut scratch: Vec<T> = xs.to_vec();
        for i in 0..k {
            let j = i + self.next_below((scratch.len() - i) as u64) as usize;
            scratch.swap(i, j);
        }
        scratch.truncate(k);
        scratch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = RngStream::new(1);
        let mut b = RngStream::new(2);
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn split_is_deterministic_and_independent_of_parent_state() {
        let mut parent = RngStream::new(7);
        let child_before = parent.split(3);
        parent.next_u64();
        let child_after = parent.split(3);
        assert_eq!(child_before, child_after);
        assert_ne!(child_before, parent.split(4));
    }

    #[test]
    fn next_f64_in_unit_interval() {
        let mut rng = RngStream::new(9);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn next_below_is_in_range() {
        let mut rng = RngStream::new(11);
        for bound in [1u64, 2, 3, 7, 64, 1000] {
            for _ in 0..1000 {
                assert!(rng.next_below(bound) < bound);
            }
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(13);
        let mut xs: Vec<u32> = (0..50).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn choose_k_distinct() {
        let mut rng = RngStream::new(17);
        let pool: Vec<u64> = (0..20).collect();
        for _ in 0..200 {
            let picked = rng.choose_k(&pool, 5);
            let mut sorted = picked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = RngStream::new(19);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
