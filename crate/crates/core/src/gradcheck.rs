//! Central finite differences, the independent oracle every gradient in this
//! workspace is checked against.

use alloc::vec::Vec;

use crate::mat::Mat;
use crate::mlp::{Activation, MlpParams};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Central-difference Jacobian of `f` at `point`: row j, column i holds
/// ∂f_j/∂x_i estimated with step `h`.
pub fn finite_diff_jacobian<F>(mut f: F, point: &[f64], h: f64) -> Result<Mat>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidSpec(alloc::format!("step h must be > 0, got {h}")));
    }
    let n = point.len();
    let mut x = point.to_vec();
    let mut jac: Option<Mat> = None;
    for i in 0..n {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if fp.len() != fm.len() {
            return Err(Error::shape(
                "finite_diff_jacobian output",
                (fp.len(), 1),
                (fm.len(), 1),
            ));
        }
        let j = jac.get_or_insert_with(|| Mat::zeros(fp.len(), n));
        if fp.len() != j.rows() {
            return Err(Error::shape(
                "finite_diff_jacobian output",
                (j.rows(), 1),
                (fp.len(), 1),
            ));
        }
        for (r, (p, m)) in fp.iter().zip(&fm).enumerate() {
            if !p.is_finite() || !m.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite_diff_jacobian evaluation",
                    layer: i,
                });
            }
            j.set(r, i, (p - m) / (2.0 * h));
        }
    }
    Ok(jac.unwrap_or_else(|| Mat::zeros(0, n)))
}

/// Relative error with an absolute floor, the comparison used by all
/// gradient checks: |a − b| / max(floor, |a|, |b|).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / floor.max(a.abs()).max(b.abs())
}

/// Draw a random architecture and point keyed by `seed`, and return the worst
/// relative error between reverse-mode gradients and central finite
/// differences over all parameter and input coordinates.
///
/// Points are resampled until every leaky-rectifier unit sits at least 1e-3
/// away from its kink, where finite differences are meaningless.
pub fn mlp_grad_check(seed: u64) -> Result<f64> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut r = rng::stream(seed, 0);
    let net = random_net(&mut r)?;
    let batch = 1 + (seed % 3) as usize;

    let mut x = sample_away_from_kinks(&net, batch, &mut r)?;
    let upstream = rng::normal_mat(&mut r, batch, net.output_dim());

    let (_, tape) = net.forward(&x)?;
    let (grads, input_grad) = net.backward(&tape, &upstream)?;

    // Scalar objective L = sum(upstream ⊙ output), differentiated two ways.
    let loss_of = |net: &MlpParams, x: &Mat| -> f64 {
        let y = net.forward_only(x).expect("shapes fixed");
        y.data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut worst = 0.0f64;

    let flat = net.flatten();
    let mut probe = net.clone();
    let fd_params = finite_diff_jacobian(
        |p| {
            probe.set_from_flat(p).expect("same length");
            alloc::vec![loss_of(&probe, &x)]
        },
        &flat,
        H,
    )?;
    for (a, b) in grads.flatten().iter().zip(fd_params.row(0)) {
        worst = worst.max(rel_err(*a, *b, FLOOR));
    }

    let x_flat: Vec<f64> = x.data().to_vec();
    let rows = x.rows();
    let cols = x.cols();
    let fd_input = finite_diff_jacobian(
        |p| {
            x.data_mut().copy_from_slice(p);
            alloc::vec![loss_of(&net, &x)]
        },
        &x_flat,
        H,
    )?;
    for (a, b) in input_grad.data().iter().zip(fd_input.row(0)) {
        worst = worst.max(rel_err(*a, *b, FLOOR));
    }
    debug_assert_eq!((rows, cols), (input_grad.rows(), input_grad.cols()));
    Ok(worst)
}

const ACT_POOL: [Activation; 5] = [
    Activation::LeakyRelu,
    Activation::Tanh,
    Activation::Softplus,
    Activation::Identity,
    Activation::Sigmoid,
];

fn random_net(r: &mut Stream) -> Result<MlpParams> {
    use rand::Rng;
    let depth = r.gen_range(1..=3usize);
    let mut dims = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        dims.push(r.gen_range(1..=6usize));
    }
    let hidden = ACT_POOL[r.gen_range(0..ACT_POOL.len())];
    let out = ACT_POOL[r.gen_range(0..ACT_POOL.len())];
    MlpParams::init(&dims, hidden, out, r)
}

fn sample_away_from_kinks(net: &MlpParams, batch: usize, r: &mut Stream) -> Result<Mat> {
    'resample: for _ in 0..200 {
        let x = rng::normal_mat(r, batch, net.input_dim());
        let mut cur = x.clone();
        for l in net.layers() {
            let mut z = cur.matmul(&l.w)?;
            for row in 0..z.rows() {
                for j in 0..z.cols() {
                    let v = z.get(row, j) + l.b[j];
                    z.set(row, j, l.act.apply(v));
                    if l.act == Activation::LeakyRelu && z.get(row, j).abs() < 1e-3 {
                        continue 'resample;
                    }
                }
            }
            cur = z;
        }
        return Ok(x);
    }
    Err(Error::Degenerate(
        "could not find a kink-free probe point".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmath;

    #[test]
    fn linear_map_recovers_matrix() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[-0.5, 3.0], &[0.0, 1.0]]).unwrap();
        let j = finite_diff_jacobian(
            |x| {
                (0..3)
                    .map(|r| a.get(r, 0) * x[0] + a.get(r, 1) * x[1])
                    .collect()
            },
            &[0.3, -0.7],
            1e-5,
        )
        .unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((j.get(r, c) - a.get(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_map_gives_zero() {
        let j = finite_diff_jacobian(|_| alloc::vec![4.0, 2.0], &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert_eq!(j, Mat::zeros(2, 3));
    }

    #[test]
    fn elementwise_sin_at_zero_is_identity() {
        let j = finite_diff_jacobian(
            |x| x.iter().map(|&v| fmath::sin(v)).collect(),
            &[0.0, 0.0, 0.0],
            1e-4,
        )
        .unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((j.get(r, c) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn non_finite_output_is_a_hard_failure() {
        let res = finite_diff_jacobian(|x| alloc::vec![1.0 / (x[0] - x[0])], &[1.0], 1e-5);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_jacobian(|x| x.to_vec(), &[1.0], 0.0).is_err());
        assert!(finite_diff_jacobian(|x| x.to_vec(), &[1.0], -1.0).is_err());
    }

    #[test]
    fn reverse_mode_matches_finite_differences() {
        for seed in 0..25 {
            let worst = mlp_grad_check(seed).unwrap();
            assert!(worst < 1e-4, "seed {seed}: rel err {worst:e}");
        }
    }
}
