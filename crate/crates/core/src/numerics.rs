//! Vector math shared by every other module: normalization, cosine
//! similarity, stable softplus/sigmoid, a seeded PRNG and a central
//! finite-difference gradient helper.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QamoError, Result};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM_EPS: f64 = 1e-30;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Seeded generator used everywhere randomness is needed.
///
/// Backed by ChaCha8, whose output stream is fixed by the seed and does not
/// depend on platform or pointer width.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> Self {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
            .rotate_left(17);
        Self::new(mixed)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = rand::Rng::random(&mut self.inner);
        lo + (hi - lo) * u
    }

    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, &mut self.inner);
    }

    /// `amount` distinct indices from `0..len`, in ascending order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.inner, len, amount).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(QamoError::DimMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, v.len())?;
        Ok(self.iter_rows().map(|row| dot(row, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn mul_vec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.iter_rows().zip(v) {
            axpy(vi, row, &mut out);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

#[inline]
pub fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(QamoError::DimMismatch { expected, found })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n.is_nan() || n < ZERO_NORM_EPS {
        return Err(QamoError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log Σ e^{x_i}`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities computed against the max logit.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Central-difference gradient `(f(x + h e_j) − f(x − h e_j)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + h;
            let plus = f(&probe);
            probe[j] = orig - h;
            let minus = f(&probe);
            probe[j] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or `0` when both are exactly zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Isotropic Gaussian vector with the given mean and standard deviation.
pub fn gaussian_vec(rng: &mut SeededRng, mean: &[f64], spread: f64) -> Vec<f64> {
    mean.iter().map(|m| m + spread * rng.normal()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let v = unit_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            unit_normalize(&[1.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert!(matches!(
            unit_normalize(&[0.0, 0.0]),
            Err(QamoError::ZeroNorm)
        ));
        assert!(matches!(
            unit_normalize(&[1e-31, 0.0]),
            Err(QamoError::ZeroNorm)
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((cosine(&[0.6, 0.8], &[0.8, 0.6]).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(QamoError::DimMismatch { .. })
        ));
        // rounding past 1 is absorbed
        assert_eq!(cosine(&[1.0 + 1e-15], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], DEFAULT_FD_STEP);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 3.0, &[1.0, -2.0, 0.5], DEFAULT_FD_STEP);
        assert!(g.iter().all(|&x| x == 0.0));

        // d/dx softplus(α(m0 − x)) = −α σ(α(m0 − x)) = −α/2 at x = m0
        let g = finite_diff_grad(|x| softplus(20.0 * (0.9 - x[0])), &[0.9], DEFAULT_FD_STEP);
        assert!((g[0] + 10.0).abs() < 1e-4);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        let xs: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_eq!(xs, ys);
        assert_ne!(
            SeededRng::new(7).fork(1).normal(),
            SeededRng::new(7).fork(2).normal()
        );
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let xs = [0.3, -1.2, 2.0];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
        assert!(log_sum_exp(&[1000.0, 1000.0]).is_finite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0f64..100.0, 1..12)
                .prop_filter("nonzero", |v| norm(v) > 1e-6)
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(v in nonzero_vec()) {
                let once = unit_normalize(&v).unwrap();
                prop_assert!((norm(&once) - 1.0).abs() < 1e-12);
                let twice = unit_normalize(&once).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn cosine_is_symmetric(a in nonzero_vec(), seed in any::<u64>()) {
                let a = unit_normalize(&a).unwrap();
                let mut rng = SeededRng::new(seed);
                let b: Vec<f64> = a.iter().map(|_| rng.normal()).collect();
                prop_assume!(norm(&b) > 1e-6);
                let b = unit_normalize(&b).unwrap();
                prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            }
        }
    }
}
