//! Scalar and vector helpers shared by every module, plus seeded randomness.
//!
//! All arithmetic is `f64`. Transcendental functions come from `libm` so the
//! core stays `no_std` and results do not depend on the platform libm.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Linear-interpolation quantile (rank `1 + q (n - 1)`, one-based).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

/// Same as [`percentile`] for input that is already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter("quantile outside [0, 1]"));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Inverse error function, accurate to ~1e-15 on (-1, 1).
///
/// Starts from Winitzki's closed-form approximation and polishes with Newton
/// steps on `libm::erf`; falls back to bisection if Newton stalls.
pub fn erfinv(y: f64) -> Result<f64> {
    if !y.is_finite() || y.abs() >= 1.0 {
        return Err(Error::OutOfDomain);
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    const A: f64 = 0.147;
    let ln = libm::log(1.0 - y * y);
    let t = 2.0 / (core::f64::consts::PI * A) + ln / 2.0;
    let mut x = libm::copysign(libm::sqrt(libm::sqrt(t * t - ln / A) - t), y);

    let two_over_sqrt_pi = 2.0 / libm::sqrt(core::f64::consts::PI);
    for _ in 0..100 {
        let err = libm::erf(x) - y;
        let slope = two_over_sqrt_pi * libm::exp(-x * x);
        if slope == 0.0 {
            break;
        }
        let step = err / slope;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            return Ok(x);
        }
    }

    // Bisection on [0, 6] (erf(6) == 1 in f64) for the magnitude.
    let target = y.abs();
    let (mut lo, mut hi) = (0.0_f64, 6.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if libm::erf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(libm::copysign(0.5 * (lo + hi), y))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mu = mean(values);
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64;
    libm::sqrt(var)
}

pub fn norm(values: &[f64]) -> f64 {
    libm::sqrt(values.iter().map(|v| v * v).sum())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean distance between two equal-length vectors.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch);
    }
    Ok(libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()))
}

/// z-score with population standard deviation. A vector whose standard
/// deviation is below `1e-12` whitens to zeros.
pub fn whiten(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::DegenerateVector);
    }
    let mu = mean(v);
    let sd = std_dev(v);
    if sd < 1e-12 {
        return Ok(alloc::vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| (x - mu) / sd).collect())
}

/// 1-Wasserstein distance between two equal-size empirical distributions:
/// mean absolute difference of the sorted samples.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch);
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Immutable descriptor of a random stream: a run seed plus a hierarchical
/// label. Equal descriptors always produce bit-identical draw sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self { seed, stream: fnv1a(label.as_bytes()) }
    }

    /// Child stream identified by a textual label.
    pub fn derive(&self, label: &str) -> Self {
        Self { seed: self.seed, stream: splitmix(self.stream ^ fnv1a(label.as_bytes())) }
    }

    /// Child stream identified by an integer (iteration, replica, ...).
    pub fn index(&self, i: u64) -> Self {
        Self { seed: self.seed, stream: splitmix(self.stream.rotate_left(17) ^ splitmix(i)) }
    }

    pub fn rng(&self) -> SimRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(self.stream);
        SimRng { inner }
    }
}

/// Sequential generator over one [`RngStream`].
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniformly distributed unit vector in `R^n`.
    pub fn unit_vector(&mut self, n: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(n);
            let len = norm(&v);
            if len > 1e-12 {
                return v.into_iter().map(|x| x / len).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(), 3.0);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((percentile(&ten, 0.25).unwrap() - 3.25).abs() < 1e-12);
        assert_eq!(percentile(&[], 0.5), Err(Error::EmptyHistory));
    }

    #[test]
    fn percentile_extremes_are_min_and_max() {
        let v = [4.0, -1.0, 7.5, 2.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), -1.0);
        assert_eq!(percentile(&v, 1.0).unwrap(), 7.5);
    }

    #[test]
    fn erfinv_examples() {
        assert_eq!(erfinv(0.0).unwrap(), 0.0);
        assert!((erfinv(0.98).unwrap() - 1.644_976).abs() < 1e-6);
        assert!((erfinv(0.5).unwrap() - 0.476_936).abs() < 1e-6);
        assert_eq!(erfinv(1.0), Err(Error::OutOfDomain));
        assert_eq!(erfinv(-1.5), Err(Error::OutOfDomain));
    }

    #[test]
    fn erfinv_inverts_erf() {
        let mut rng = RngStream::new(11, "erfinv").rng();
        for _ in 0..1000 {
            let y = (rng.uniform() * 2.0 - 1.0) * 0.999;
            let x = erfinv(y).unwrap();
            assert!((erf(x) - y).abs() < 1e-9, "y={y}");
        }
    }

    #[test]
    fn whiten_examples() {
        let w = whiten(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [-1.224_745, 0.0, 1.224_745];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(whiten(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(whiten(&[2.0]), Err(Error::DegenerateVector));
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1d(&[0.0; 3], &[1.0; 3]).unwrap(), 1.0);
        assert_eq!(wasserstein1d(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1d(&[0.0], &[1.0, 2.0]), Err(Error::ShapeMismatch));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = RngStream::new(5, "attack").derive("stage3").index(1);
        let b = RngStream::new(5, "attack").derive("stage3").index(1);
        let c = RngStream::new(5, "attack").derive("stage3").index(2);
        let (mut ra, mut rb, mut rc) = (a.rng(), b.rng(), c.rng());
        let sa: Vec<u64> = (0..16).map(|_| ra.next_u64()).collect();
        let sb: Vec<u64> = (0..16).map(|_| rb.next_u64()).collect();
        let sc: Vec<u64> = (0..16).map(|_| rc.next_u64()).collect();
        assert_eq!(sa, sb);
        assert_ne!(sa, sc);
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut rng = RngStream::new(3, "sample").rng();
        let mut s = rng.sample_indices(10, 4);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 4);
    }
}
