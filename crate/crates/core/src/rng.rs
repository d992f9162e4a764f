//! Seeded randomness.
//!
//! Every stochastic component takes a `u64` seed and derives independent
//! ChaCha streams from it by stream index, so adding a consumer never shifts
//! the draws of an existing one. Normal variates use Box-Muller on top of the
//! uniform stream rather than a library sampler; the exact draw sequence is
//! part of the determinism contract and must not change under dependency
//! upgrades.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::fmath;
use crate::mat::Mat;

pub type Stream = ChaCha12Rng;

/// Independent stream `idx` of the generator family keyed by `seed`.
pub fn stream(seed: u64, idx: u64) -> Stream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

/// One standard normal draw. Consumes two uniforms; the sine partner of the
/// Box-Muller pair is discarded, so bulk fills should prefer
/// [`fill_standard_normal`].
pub fn normal(rng: &mut Stream) -> f64 {
    let (z0, _z1) = normal_pair(rng);
    z0
}

fn normal_pair(rng: &mut Stream) -> (f64, f64) {
    // u1 ∈ (0, 1]: keeps ln away from 0.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let r = fmath::sqrt(-2.0 * fmath::ln(u1));
    let th = 2.0 * PI * u2;
    (r * fmath::cos(th), r * fmath::sin(th))
}

pub fn fill_standard_normal(rng: &mut Stream, out: &mut [f64]) {
    let mut i = 0;
    while i + 1 < out.len() {
        let (a, b) = normal_pair(rng);
        out[i] = a;
        out[i + 1] = b;
        i += 2;
    }
    if i < out.len() {
        out[i] = normal(rng);
    }
}

pub fn normal_mat(rng: &mut Stream, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    fill_standard_normal(rng, m.data_mut());
    m
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle(rng: &mut Stream, idx: &mut [usize]) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

/// 0..n shuffled.
pub fn permutation(rng: &mut Stream, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a1: Vec<f64> = {
            let mut r = stream(7, 0);
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        let a2: Vec<f64> = {
            let mut r = stream(7, 0);
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        let b: Vec<f64> = {
            let mut r = stream(7, 1);
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = stream(11, 0);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let (a, b) = normal_pair(&mut rng);
            sum += a + b;
            sumsq += a * a + b * b;
        }
        let m = sum / (2.0 * n as f64);
        let v = sumsq / (2.0 * n as f64) - m * m;
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((v - 1.0).abs() < 0.02, "var {v}");
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = stream(3, 9);
        let p = permutation(&mut rng, 100);
        let mut seen = [false; 100];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }
}
