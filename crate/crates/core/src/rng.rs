//! Portable, splittable random streams.
//!
//! Every random draw in the crate comes from ChaCha20 (a 64-bit-counter
//! stream cipher generator) keyed by the run seed. Independent consumers get
//! disjoint 64-bit stream ids, so results do not depend on the order in
//! which samples, users or paths are generated.
//!
//! Stream id layout (most significant bits first):
//!
//! | bits  | field                                  |
//! |-------|----------------------------------------|
//! | 63-56 | domain (what the stream is used for)   |
//! | 55-24 | sample index (32 bits)                 |
//! | 23-12 | user index (12 bits)                   |
//! | 11-0  | path index (12 bits)                   |

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. Distinct domains never share a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    PathGeometry = 1,
    UplinkGain = 2,
    DownlinkGain = 3,
    PilotNoise = 4,
    WeightInit = 5,
    Shuffle = 6,
    Test = 7,
}

pub fn stream_id(domain: Domain, sample: u64, user: usize, path: usize) -> u64 {
    ((domain as u64) << 56) | ((sample & 0xFFFF_FFFF) << 24) | (((user as u64) & 0xFFF) << 12) | ((path as u64) & 0xFFF)
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha20Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn for_key(seed: u64, domain: Domain, sample: u64, user: usize, path: usize) -> Self {
        Self::new(seed, stream_id(domain, sample, user, path))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval `(low, high)`.
    pub fn uniform_open(&mut self, low: f64, high: f64) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 {
                return low + (high - low) * u;
            }
        }
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        let u: f64 = self.inner.random();
        low + (high - low) * u
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Circularly-symmetric complex Gaussian with unit variance, `CN(0, 1)`.
    pub fn complex_normal(&mut self) -> Complex64 {
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        Complex64::new(self.normal() * scale, self.normal() * scale)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = StreamRng::for_key(9, Domain::UplinkGain, 3, 1, 2);
        let mut b = StreamRng::for_key(9, Domain::UplinkGain, 3, 1, 2);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_fields_give_distinct_ids() {
        let base = stream_id(Domain::PathGeometry, 5, 2, 1);
        assert_ne!(base, stream_id(Domain::DownlinkGain, 5, 2, 1));
        assert_ne!(base, stream_id(Domain::PathGeometry, 6, 2, 1));
        assert_ne!(base, stream_id(Domain::PathGeometry, 5, 3, 1));
        assert_ne!(base, stream_id(Domain::PathGeometry, 5, 2, 0));
    }

    #[test]
    fn permutation_is_bijective() {
        let mut rng = StreamRng::new(1, 0);
        let mut p = rng.permutation(17);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn complex_normal_unit_variance() {
        let mut rng = StreamRng::new(2, 0);
        let n = 20_000;
        let var: f64 = (0..n).map(|_| rng.complex_normal().norm_sqr()).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }
}
