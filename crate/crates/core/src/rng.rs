//! Deterministic random streams.
//!
//! All randomness in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`),
//! a counter-based generator whose output is fixed across platforms. A stream
//! for a given `(seed, key)` pair is seeded with
//! `splitmix64(seed ^ fnv1a64(key))`, so per-document streams are independent
//! of processing order and thread count.
//!
//! Bounded integers are drawn with rejection sampling on raw `u64` words and
//! uniform reals from the top 53 bits, so the mapping from generator output to
//! results does not depend on `rand`'s distribution internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One SplitMix64 output step.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the stream identified by `(seed, key)`.
pub fn stream(seed: u64, key: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a64(key.as_bytes())))
}

/// Uniform integer in `[0, n)`. Panics if `n == 0`.
pub fn below(rng: &mut impl RngCore, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let span = 1u128 << 64;
    let limit = span - span % u128::from(n);
    loop {
        let x = rng.next_u64();
        if u128::from(x) < limit {
            return x % n;
        }
    }
}

/// Uniform real in `[0, 1)`.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `k` distinct values from `[0, n)` by a partial Fisher-Yates shuffle, sorted ascending.
pub fn sample_without_replacement(rng: &mut impl RngCore, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn streams_are_keyed() {
        let a: Vec<u64> = (0..4).map(|_| stream(1, "d1").next_u64()).collect();
        let mut r = stream(1, "d1");
        let b: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(a[0], b[0]);
        assert_ne!(stream(1, "d1").next_u64(), stream(1, "d2").next_u64());
        assert_ne!(stream(1, "d1").next_u64(), stream(2, "d1").next_u64());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = stream(9, "x");
        for n in [1u64, 2, 3, 7, 1000, u64::MAX] {
            for _ in 0..100 {
                assert!(below(&mut r, n) < n);
            }
        }
    }

    #[test]
    fn sample_is_sorted_and_distinct() {
        let mut r = stream(3, "y");
        for _ in 0..50 {
            let s = sample_without_replacement(&mut r, 20, 7);
            assert_eq!(s.len(), 7);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < 20));
        }
        assert_eq!(sample_without_replacement(&mut r, 5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unit_interval() {
        let mut r = stream(4, "z");
        for _ in 0..1000 {
            let u = unit_f64(&mut r);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
