//! Gaussian-kernel statistics: MMD² (unbiased U-statistic), biased HSIC, the
//! median heuristic, and permutation calibration.
//!
//! The trainers also need gradients of these statistics with respect to the
//! sample rows; those are written out analytically here (the kernel width is
//! treated as a constant even when it came from the median heuristic).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::mat::{sq_dist, Mat};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelWidth {
    /// Median pairwise distance of the sample the statistic is computed on.
    Median,
    /// Fixed width σ > 0.
    Fixed(f64),
}

/// Gaussian kernel k(a, b) = exp(−‖a − b‖² / (2σ²)). The family is fixed;
/// only the width varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub width: KernelWidth,
}

impl KernelSpec {
    pub fn median() -> KernelSpec {
        KernelSpec {
            width: KernelWidth::Median,
        }
    }

    pub fn fixed(sigma: f64) -> KernelSpec {
        KernelSpec {
            width: KernelWidth::Fixed(sigma),
        }
    }

    /// Concrete width for a statistic over the given row sets (concatenated
    /// for the median heuristic).
    pub fn resolve(&self, samples: &[&Mat]) -> Result<f64> {
        match self.width {
            KernelWidth::Fixed(s) => {
                if s > 0.0 && s.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::InvalidSpec(alloc::format!(
                        "kernel width must be > 0, got {s}"
                    )))
                }
            }
            KernelWidth::Median => median_pairwise_distance(samples),
        }
    }
}

/// Median of all pairwise Euclidean distances among the stacked rows,
/// floored at 1e-6 so duplicate-heavy samples cannot produce a zero width.
/// Even counts average the two middle order statistics.
pub fn median_pairwise_distance(samples: &[&Mat]) -> Result<f64> {
    let cols = samples.first().map_or(0, |m| m.cols());
    let total: usize = samples.iter().map(|m| m.rows()).sum();
    if total < 2 {
        return Err(Error::Degenerate(
            "median heuristic needs at least 2 rows".into(),
        ));
    }
    let mut rows: Vec<&[f64]> = Vec::with_capacity(total);
    for m in samples {
        if m.cols() != cols {
            return Err(Error::shape(
                "median_pairwise_distance",
                (m.rows(), cols),
                m.shape(),
            ));
        }
        for i in 0..m.rows() {
            rows.push(m.row(i));
        }
    }
    let mut dists = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in i + 1..total {
            dists.push(fmath::sqrt(sq_dist(rows[i], rows[j])));
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    Ok(med.max(1e-6))
}

#[inline]
fn gauss(d2: f64, sigma: f64) -> f64 {
    fmath::exp(-d2 / (2.0 * sigma * sigma))
}

pub(crate) fn gram(x: &Mat, y: &Mat, sigma: f64) -> Mat {
    Mat::from_fn(x.rows(), y.rows(), |i, j| {
        gauss(sq_dist(x.row(i), y.row(j)), sigma)
    })
}

// ── MMD² ───────────────────────────────────────────────────────────────

/// Unbiased U-statistic MMD² between the row samples of `x` and `y`.
/// Slightly negative values at the null are expected.
pub fn mmd2_unbiased(x: &Mat, y: &Mat, kernel: &KernelSpec) -> Result<f64> {
    check_two_sample(x, y)?;
    let sigma = kernel.resolve(&[x, y])?;
    Ok(mmd2_terms_full(x, y, sigma).0)
}

/// MMD² with gradients with respect to every row of `x` and `y`, for a fixed
/// width (resolve the width first; it is not differentiated).
pub fn mmd2_unbiased_with_grad(x: &Mat, y: &Mat, sigma: f64) -> Result<(f64, Mat, Mat)> {
    check_two_sample(x, y)?;
    let (m, n) = (x.rows() as f64, y.rows() as f64);
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut gx = Mat::zeros(x.rows(), x.cols());
    let mut gy = Mat::zeros(y.rows(), y.cols());
    let (value, kxx, kyy, kxy) = mmd2_terms_full(x, y, sigma);

    // ∂/∂x_i of Σ_{p≠q} k(x_p, x_q): 2 Σ_{q≠i} k(x_i, x_q)(x_q − x_i)/σ².
    let cxx = 2.0 / (m * (m - 1.0));
    for i in 0..x.rows() {
        for q in 0..x.rows() {
            if q == i {
                continue;
            }
            let k = kxx.get(i, q);
            let coef = cxx * k * inv_s2;
            for (g, (xq, xi)) in gx
                .row_mut(i)
                .iter_mut()
                .zip(x.row(q).iter().zip(x.row(i)))
            {
                *g += coef * (xq - xi);
            }
        }
    }
    let cyy = 2.0 / (n * (n - 1.0));
    for i in 0..y.rows() {
        for q in 0..y.rows() {
            if q == i {
                continue;
            }
            let k = kyy.get(i, q);
            let coef = cyy * k * inv_s2;
            for (g, (yq, yi)) in gy
                .row_mut(i)
                .iter_mut()
                .zip(y.row(q).iter().zip(y.row(i)))
            {
                *g += coef * (yq - yi);
            }
        }
    }
    let cxy = -2.0 / (m * n);
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let k = kxy.get(i, j);
            let coef = cxy * k * inv_s2;
            for (g, (yj, xi)) in gx
                .row_mut(i)
                .iter_mut()
                .zip(y.row(j).iter().zip(x.row(i)))
            {
                *g += coef * (yj - xi);
            }
            for (g, (xi, yj)) in gy
                .row_mut(j)
                .iter_mut()
                .zip(x.row(i).iter().zip(y.row(j)))
            {
                *g += coef * (xi - yj);
            }
        }
    }
    Ok((value, gx, gy))
}

fn check_two_sample(x: &Mat, y: &Mat) -> Result<()> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Degenerate(alloc::format!(
            "mmd2 needs ≥ 2 rows per sample, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd2", x.shape(), y.shape()));
    }
    Ok(())
}

fn mmd2_terms_full(x: &Mat, y: &Mat, sigma: f64) -> (f64, Mat, Mat, Mat) {
    let (m, n) = (x.rows(), y.rows());
    let kxx = gram(x, x, sigma);
    let kyy = gram(y, y, sigma);
    let kxy = gram(x, y, sigma);
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += kxx.get(i, j);
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += kyy.get(i, j);
            }
        }
    }
    let sxy: f64 = kxy.data().iter().sum();
    let v = sxx / (m as f64 * (m as f64 - 1.0)) + syy / (n as f64 * (n as f64 - 1.0))
        - 2.0 * sxy / (m as f64 * n as f64);
    (v, kxx, kyy, kxy)
}

// ── HSIC ───────────────────────────────────────────────────────────────

/// Biased HSIC estimate trace(K H L H)/(m−1)², always ≥ 0.
pub fn hsic_biased(x: &Mat, y: &Mat, kx: &KernelSpec, ky: &KernelSpec) -> Result<f64> {
    check_paired(x, y)?;
    let sx = kx.resolve(&[x])?;
    let sy = ky.resolve(&[y])?;
    let k = gram(x, x, sx);
    let l = gram(y, y, sy);
    let m = double_center(&l);
    Ok(frob_inner(&k, &m) / sq(x.rows() as f64 - 1.0))
}

/// HSIC plus gradients with respect to the rows of both samples, fixed
/// widths.
pub fn hsic_biased_with_grad(
    x: &Mat,
    y: &Mat,
    sigma_x: f64,
    sigma_y: f64,
) -> Result<(f64, Mat, Mat)> {
    check_paired(x, y)?;
    let m = x.rows();
    let k = gram(x, x, sigma_x);
    let l = gram(y, y, sigma_y);
    let hlh = double_center(&l);
    let hkh = double_center(&k);
    let denom = sq(m as f64 - 1.0);
    let value = frob_inner(&k, &hlh) / denom;

    let mut gx = Mat::zeros(x.rows(), x.cols());
    let inv_sx2 = 1.0 / (sigma_x * sigma_x);
    for i in 0..m {
        for q in 0..m {
            if q == i {
                continue;
            }
            let coef = 2.0 * k.get(i, q) * hlh.get(i, q) * inv_sx2 / denom;
            for (g, (xq, xi)) in gx
                .row_mut(i)
                .iter_mut()
                .zip(x.row(q).iter().zip(x.row(i)))
            {
                *g += coef * (xq - xi);
            }
        }
    }
    let mut gy = Mat::zeros(y.rows(), y.cols());
    let inv_sy2 = 1.0 / (sigma_y * sigma_y);
    for i in 0..m {
        for q in 0..m {
            if q == i {
                continue;
            }
            let coef = 2.0 * l.get(i, q) * hkh.get(i, q) * inv_sy2 / denom;
            for (g, (yq, yi)) in gy
                .row_mut(i)
                .iter_mut()
                .zip(y.row(q).iter().zip(y.row(i)))
            {
                *g += coef * (yq - yi);
            }
        }
    }
    Ok((value, gx, gy))
}

/// Unbiased HSIC U-statistic on zero-diagonal grams (m ≥ 4). Exactly
/// mean-zero under independence, so a minibatch gradient of this estimator
/// carries pure dependence signal with no O(1/m) bias term to descend;
/// the price is that values at the null fluctuate on both sides of zero.
pub fn hsic_unbiased(x: &Mat, y: &Mat, kx: &KernelSpec, ky: &KernelSpec) -> Result<f64> {
    check_unbiased(x, y)?;
    let sx = kx.resolve(&[x])?;
    let sy = ky.resolve(&[y])?;
    Ok(hsic_unbiased_parts(x, y, sx, sy).0)
}

/// [`hsic_unbiased`] plus gradients with respect to the rows of both
/// samples, fixed widths.
pub fn hsic_unbiased_with_grad(
    x: &Mat,
    y: &Mat,
    sigma_x: f64,
    sigma_y: f64,
) -> Result<(f64, Mat, Mat)> {
    check_unbiased(x, y)?;
    let (value, k, l, krow, lrow, kpp, lpp) = hsic_unbiased_parts(x, y, sigma_x, sigma_y);
    let m = x.rows() as f64;
    let c0 = 1.0 / (m * (m - 3.0));
    let c1 = c0 / ((m - 1.0) * (m - 2.0));
    let c2 = 2.0 * c0 / (m - 2.0);

    // d value / d k_iq for i ≠ q, symmetrized over the two occurrences of
    // the unordered pair, then chained through the Gaussian kernel.
    let mut gx = Mat::zeros(x.rows(), x.cols());
    let inv_sx2 = 1.0 / (sigma_x * sigma_x);
    for i in 0..x.rows() {
        for q in 0..x.rows() {
            if q == i {
                continue;
            }
            let w = 2.0 * c0 * l.get(i, q) + 2.0 * c1 * lpp - c2 * (lrow[i] + lrow[q]);
            let coef = w * k.get(i, q) * inv_sx2;
            for (g, (xq, xi)) in gx
                .row_mut(i)
                .iter_mut()
                .zip(x.row(q).iter().zip(x.row(i)))
            {
                *g += coef * (xq - xi);
            }
        }
    }
    let mut gy = Mat::zeros(y.rows(), y.cols());
    let inv_sy2 = 1.0 / (sigma_y * sigma_y);
    for i in 0..y.rows() {
        for q in 0..y.rows() {
            if q == i {
                continue;
            }
            let w = 2.0 * c0 * k.get(i, q) + 2.0 * c1 * kpp - c2 * (krow[i] + krow[q]);
            let coef = w * l.get(i, q) * inv_sy2;
            for (g, (yq, yi)) in gy
                .row_mut(i)
                .iter_mut()
                .zip(y.row(q).iter().zip(y.row(i)))
            {
                *g += coef * (yq - yi);
            }
        }
    }
    Ok((value, gx, gy))
}

/// Value plus the grams and their diagonal-excluded row sums. `l.get(i, q)`
/// with i ≠ q already equals the zero-diagonal entry, so only sums need the
/// diagonal (always exactly 1) removed.
#[allow(clippy::type_complexity)]
fn hsic_unbiased_parts(
    x: &Mat,
    y: &Mat,
    sigma_x: f64,
    sigma_y: f64,
) -> (f64, Mat, Mat, Vec<f64>, Vec<f64>, f64, f64) {
    let m = x.rows();
    let k = gram(x, x, sigma_x);
    let l = gram(y, y, sigma_y);
    let krow: Vec<f64> = (0..m).map(|i| k.row(i).iter().sum::<f64>() - 1.0).collect();
    let lrow: Vec<f64> = (0..m).map(|i| l.row(i).iter().sum::<f64>() - 1.0).collect();
    let kpp: f64 = krow.iter().sum();
    let lpp: f64 = lrow.iter().sum();
    let mut tr_kl = 0.0;
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                tr_kl += k.get(i, j) * l.get(i, j);
            }
        }
        cross += krow[i] * lrow[i];
    }
    let mf = m as f64;
    let value = (tr_kl + kpp * lpp / ((mf - 1.0) * (mf - 2.0)) - 2.0 * cross / (mf - 2.0))
        / (mf * (mf - 3.0));
    (value, k, l, krow, lrow, kpp, lpp)
}

fn check_unbiased(x: &Mat, y: &Mat) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::shape("hsic", x.shape(), y.shape()));
    }
    if x.rows() < 4 {
        return Err(Error::Degenerate(alloc::format!(
            "unbiased HSIC needs at least 4 rows, got {}",
            x.rows()
        )));
    }
    Ok(())
}

/// 95%-style permutation calibration: HSIC under `n_perms` random row
/// permutations of `y`, returning the `q`-quantile (computed as the
/// ⌈q·n⌉-th order statistic).
///
/// Uses the identity trace(K H PLPᵀ H) = trace((PᵀKP)(H L H)): the centered
/// style gram is fixed and each permutation only re-indexes K, so the cost
/// per permutation is one O(m²) gather.
pub fn hsic_permutation_quantile(
    x: &Mat,
    y: &Mat,
    kx: &KernelSpec,
    ky: &KernelSpec,
    n_perms: usize,
    q: f64,
    rng: &mut Stream,
) -> Result<f64> {
    check_paired(x, y)?;
    if n_perms == 0 || !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidSpec(alloc::format!(
            "bad permutation setup: n_perms {n_perms}, q {q}"
        )));
    }
    let m = x.rows();
    let sx = kx.resolve(&[x])?;
    let sy = ky.resolve(&[y])?;
    let k = gram(x, x, sx);
    let hlh = double_center(&gram(y, y, sy));
    let denom = sq(m as f64 - 1.0);
    let mut stats = Vec::with_capacity(n_perms);
    for _ in 0..n_perms {
        let p = rng::permutation(rng, m);
        let mut acc = 0.0;
        for i in 0..m {
            let ki = k.row(p[i]);
            let mi = hlh.row(i);
            for (j, &mij) in mi.iter().enumerate() {
                acc += ki[p[j]] * mij;
            }
        }
        stats.push(acc / denom);
    }
    stats.sort_unstable_by(f64::total_cmp);
    let idx = (fmath::ceil(q * n_perms as f64) as usize).clamp(1, n_perms) - 1;
    Ok(stats[idx])
}

fn check_paired(x: &Mat, y: &Mat) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::shape("hsic", x.shape(), y.shape()));
    }
    if x.rows() < 3 {
        return Err(Error::Degenerate(alloc::format!(
            "hsic needs ≥ 3 rows, got {}",
            x.rows()
        )));
    }
    Ok(())
}

/// H G H with H = I − 11ᵀ/m.
fn double_center(g: &Mat) -> Mat {
    let m = g.rows();
    let mut row_mean = vec![0.0; m];
    let mut grand = 0.0;
    for i in 0..m {
        let s: f64 = g.row(i).iter().sum();
        row_mean[i] = s / m as f64;
        grand += s;
    }
    grand /= (m * m) as f64;
    // G symmetric, so column means equal row means.
    Mat::from_fn(m, m, |i, j| g.get(i, j) - row_mean[i] - row_mean[j] + grand)
}

fn frob_inner(a: &Mat, b: &Mat) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[inline]
fn sq(v: f64) -> f64 {
    v * v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_jacobian, rel_err};
    use crate::rng;

    /// Independent double-loop oracle for the unbiased estimator.
    fn mmd2_oracle(x: &Mat, y: &Mat, sigma: f64) -> f64 {
        let (m, n) = (x.rows(), y.rows());
        let mut a = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    a += gauss(sq_dist(x.row(i), x.row(j)), sigma);
                }
            }
        }
        let mut b = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    b += gauss(sq_dist(y.row(i), y.row(j)), sigma);
                }
            }
        }
        let mut c = 0.0;
        for i in 0..m {
            for j in 0..n {
                c += gauss(sq_dist(x.row(i), y.row(j)), sigma);
            }
        }
        a / (m * (m - 1)) as f64 + b / (n * (n - 1)) as f64 - 2.0 * c / (m * n) as f64
    }

    #[test]
    fn identical_samples_give_nonpositive_value_matching_oracle() {
        let x = rng::normal_mat(&mut rng::stream(1, 0), 40, 3);
        let v = mmd2_unbiased(&x, &x, &KernelSpec::fixed(1.0)).unwrap();
        assert!(v <= 0.0, "self MMD² {v}");
        assert!((v - mmd2_oracle(&x, &x, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn null_case_is_small() {
        let mut r = rng::stream(2, 0);
        let x = rng::normal_mat(&mut r, 5000, 1);
        let y = rng::normal_mat(&mut r, 5000, 1);
        let v = mmd2_unbiased(&x, &y, &KernelSpec::fixed(1.0)).unwrap();
        assert!(v.abs() < 0.005, "null MMD² {v}");
    }

    #[test]
    fn shifted_gaussians_match_closed_form() {
        // E k(X, X′) = σ/√(σ² + 2) · exp(−Δμ²/(2(σ² + 2))) for 1-D unit
        // Gaussians; with σ = 1, Δμ = 5 the population MMD² is
        // 2(k̄_xx − k̄_xy).
        let mut r = rng::stream(3, 0);
        let x = rng::normal_mat(&mut r, 1000, 1);
        let mut y = rng::normal_mat(&mut r, 1000, 1);
        for v in y.data_mut() {
            *v += 5.0;
        }
        let kxx = 1.0 / (3.0f64).sqrt();
        let kxy = kxx * (-25.0 / 6.0f64).exp();
        let expect = 2.0 * (kxx - kxy);
        let v = mmd2_unbiased(&x, &y, &KernelSpec::fixed(1.0)).unwrap();
        assert!(
            (v - expect).abs() < 0.1 * expect,
            "MMD² {v} vs closed form {expect}"
        );
    }

    #[test]
    fn mmd_is_symmetric_and_translation_invariant() {
        let mut r = rng::stream(4, 0);
        let x = rng::normal_mat(&mut r, 30, 2);
        let mut y = rng::normal_mat(&mut r, 20, 2);
        for v in y.data_mut() {
            *v = 0.5 + *v * 1.5;
        }
        let k = KernelSpec::fixed(0.8);
        let a = mmd2_unbiased(&x, &y, &k).unwrap();
        let b = mmd2_unbiased(&y, &x, &k).unwrap();
        assert!((a - b).abs() < 1e-12);

        let shift = [3.0, -2.0];
        let xs = Mat::from_fn(x.rows(), 2, |i, j| x.get(i, j) + shift[j]);
        let ys = Mat::from_fn(y.rows(), 2, |i, j| y.get(i, j) + shift[j]);
        let c = mmd2_unbiased(&xs, &ys, &k).unwrap();
        assert!((a - c).abs() < 1e-9);
    }

    #[test]
    fn median_heuristic_small_case_and_determinism() {
        let m = Mat::from_rows(&[&[0.0], &[1.0], &[3.0]]).unwrap();
        let med = median_pairwise_distance(&[&m]).unwrap();
        assert_eq!(med, 2.0);
        let x = rng::normal_mat(&mut rng::stream(5, 0), 50, 3);
        let a = median_pairwise_distance(&[&x]).unwrap();
        let b = median_pairwise_distance(&[&x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hsic_constant_y_is_zero() {
        let x = rng::normal_mat(&mut rng::stream(6, 0), 50, 2);
        let y = Mat::from_fn(50, 2, |_, _| 1.37);
        // Width must be fixed: a constant sample has zero median distance.
        let v = hsic_biased(&x, &y, &KernelSpec::median(), &KernelSpec::fixed(1.0)).unwrap();
        assert!(v.abs() < 1e-12, "HSIC {v}");
    }

    #[test]
    fn hsic_is_nonnegative_and_permutation_invariant() {
        let mut r = rng::stream(7, 0);
        let x = rng::normal_mat(&mut r, 40, 2);
        let y = rng::normal_mat(&mut r, 40, 3);
        let k = KernelSpec::median();
        let v = hsic_biased(&x, &y, &k, &k).unwrap();
        assert!(v >= 0.0);
        let p = rng::permutation(&mut r, 40);
        let xp = x.take_rows(&p);
        let yp = y.take_rows(&p);
        let vp = hsic_biased(&xp, &yp, &k, &k).unwrap();
        assert!((v - vp).abs() < 1e-12, "{v} vs {vp}");
    }

    #[test]
    fn hsic_permutation_test_separates_dependence() {
        // Committed seed block: a 95% quantile test is wrong on ~5% of
        // independent draws by construction, so the zero-false-decision
        // requirement is meaningful only over a fixed seed set.
        let k = KernelSpec::median();
        for seed in 0..10 {
            let mut r = rng::stream(1100 + seed, 0);
            let x = rng::normal_mat(&mut r, 500, 2);
            let y_indep = rng::normal_mat(&mut r, 500, 2);
            let mut perm_rng = rng::stream(1200 + seed, 0);
            let q_indep =
                hsic_permutation_quantile(&x, &y_indep, &k, &k, 200, 0.95, &mut perm_rng)
                    .unwrap();
            let v_indep = hsic_biased(&x, &y_indep, &k, &k).unwrap();
            assert!(
                v_indep <= q_indep,
                "seed {seed}: independent case flagged ({v_indep} > {q_indep})"
            );

            let y_dep = x.clone();
            let mut perm_rng = rng::stream(1300 + seed, 0);
            let q_dep = hsic_permutation_quantile(&x, &y_dep, &k, &k, 200, 0.95, &mut perm_rng)
                .unwrap();
            let v_dep = hsic_biased(&x, &y_dep, &k, &k).unwrap();
            assert!(
                v_dep > q_dep,
                "seed {seed}: identical case missed ({v_dep} ≤ {q_dep})"
            );
        }
    }

    #[test]
    fn mmd_gradients_match_finite_differences() {
        let mut r = rng::stream(8, 0);
        let x = rng::normal_mat(&mut r, 6, 2);
        let y = rng::normal_mat(&mut r, 5, 2);
        let sigma = 0.9;
        let (_, gx, gy) = mmd2_unbiased_with_grad(&x, &y, sigma).unwrap();

        let fd_x = finite_diff_jacobian(
            |flat| {
                let xm = Mat::from_vec(6, 2, flat.to_vec()).unwrap();
                alloc::vec![mmd2_unbiased(&xm, &y, &KernelSpec::fixed(sigma)).unwrap()]
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gx.data().iter().zip(fd_x.row(0)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
        let fd_y = finite_diff_jacobian(
            |flat| {
                let ym = Mat::from_vec(5, 2, flat.to_vec()).unwrap();
                alloc::vec![mmd2_unbiased(&x, &ym, &KernelSpec::fixed(sigma)).unwrap()]
            },
            y.data(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gy.data().iter().zip(fd_y.row(0)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn hsic_gradients_match_finite_differences() {
        let mut r = rng::stream(9, 0);
        let x = rng::normal_mat(&mut r, 7, 2);
        let y = rng::normal_mat(&mut r, 7, 3);
        let (sx, sy) = (0.8, 1.1);
        let (_, gx, gy) = hsic_biased_with_grad(&x, &y, sx, sy).unwrap();

        let fd_x = finite_diff_jacobian(
            |flat| {
                let xm = Mat::from_vec(7, 2, flat.to_vec()).unwrap();
                alloc::vec![
                    hsic_biased(&xm, &y, &KernelSpec::fixed(sx), &KernelSpec::fixed(sy)).unwrap()
                ]
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gx.data().iter().zip(fd_x.row(0)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
        let fd_y = finite_diff_jacobian(
            |flat| {
                let ym = Mat::from_vec(7, 3, flat.to_vec()).unwrap();
                alloc::vec![
                    hsic_biased(&x, &ym, &KernelSpec::fixed(sx), &KernelSpec::fixed(sy)).unwrap()
                ]
            },
            y.data(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gy.data().iter().zip(fd_y.row(0)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
    }

    /// Monte-Carlo oracle for the U-statistic's defining property: at the
    /// null its mean is 0, while the biased estimate sits a full O(1/m)
    /// above. Committed seed block 1400.
    #[test]
    fn unbiased_hsic_is_centered_at_null() {
        let k = KernelSpec::fixed(1.0);
        let reps = 200;
        let m = 32;
        let mut vals_u = Vec::with_capacity(reps);
        let mut vals_b = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut r = rng::stream(1400, rep as u64);
            let x = rng::normal_mat(&mut r, m, 2);
            let y = rng::normal_mat(&mut r, m, 2);
            vals_u.push(hsic_unbiased(&x, &y, &k, &k).unwrap());
            vals_b.push(hsic_biased(&x, &y, &k, &k).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mu = mean(&vals_u);
        let sd = fmath::sqrt(
            vals_u.iter().map(|v| sq(v - mu)).sum::<f64>() / (reps - 1) as f64,
        );
        let se = sd / fmath::sqrt(reps as f64);
        assert!(mu.abs() < 4.0 * se, "null mean {mu} exceeds 4·SE {se}");
        let mb = mean(&vals_b);
        assert!(mb > 10.0 * se, "biased null mean {mb} should dwarf SE {se}");
    }

    #[test]
    fn unbiased_hsic_agrees_with_biased_on_dependent_data() {
        // Both estimators converge to the population HSIC; at m = 400 with
        // maximal dependence their gap is well inside 10%.
        let mut r = rng::stream(1410, 0);
        let x = rng::normal_mat(&mut r, 400, 2);
        let y = x.clone();
        let k = KernelSpec::fixed(1.0);
        let u = hsic_unbiased(&x, &y, &k, &k).unwrap();
        let b = hsic_biased(&x, &y, &k, &k).unwrap();
        assert!(u > 0.0);
        assert!((u - b).abs() < 0.1 * b, "unbiased {u} vs biased {b}");
    }

    #[test]
    fn unbiased_hsic_gradients_match_finite_differences() {
        let mut r = rng::stream(1420, 0);
        let x = rng::normal_mat(&mut r, 7, 2);
        let y = rng::normal_mat(&mut r, 7, 3);
        let (sx, sy) = (0.8, 1.1);
        let (_, gx, gy) = hsic_unbiased_with_grad(&x, &y, sx, sy).unwrap();

        let fd_x = finite_diff_jacobian(
            |flat| {
                let xm = Mat::from_vec(7, 2, flat.to_vec()).unwrap();
                alloc::vec![
                    hsic_unbiased(&xm, &y, &KernelSpec::fixed(sx), &KernelSpec::fixed(sy))
                        .unwrap()
                ]
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gx.data().iter().zip(fd_x.row(0)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
        let fd_y = finite_diff_jacobian(
            |flat| {
                let ym = Mat::from_vec(7, 3, flat.to_vec()).unwrap();
                alloc::vec![
                    hsic_unbiased(&x, &ym, &KernelSpec::fixed(sx), &KernelSpec::fixed(sy))
                        .unwrap()
                ]
            },
            y.data(),
            1e-6,
        )
        .unwrap();
        for (a, b) in gy.data().iter().zip(fd_y.row(0)) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn unbiased_hsic_needs_four_rows() {
        let mut r = rng::stream(1430, 0);
        let x = rng::normal_mat(&mut r, 3, 2);
        let y = rng::normal_mat(&mut r, 3, 2);
        let k = KernelSpec::fixed(1.0);
        assert!(matches!(
            hsic_unbiased(&x, &y, &k, &k),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn generated_world_latents_pass_independence_test() {
        // Block independence of the sampled (c, s) pairs, tied to the
        // permutation calibration.
        let spec = crate::world::tests::small_spec(2);
        let world = crate::world::build_world(&spec).unwrap();
        let mut rng = world.stream(6);
        let b = world.sample_domain(0, 400, &mut rng).unwrap();
        let k = KernelSpec::median();
        let v = hsic_biased(&b.c, &b.s, &k, &k).unwrap();
        let mut perm_rng = rng::stream(55, 0);
        let q = hsic_permutation_quantile(&b.c, &b.s, &k, &k, 200, 0.95, &mut perm_rng).unwrap();
        assert!(v <= q, "HSIC {v} above quantile {q}");
    }
}
