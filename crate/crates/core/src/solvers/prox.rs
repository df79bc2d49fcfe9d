//! Proximal maps of the l1 and nuclear norms.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[inline]
pub(crate) fn soft_threshold(b: f64, a: f64) -> f64 {
    if b > a {
        b - a
    } else if b < -a {
        b + a
    } else {
        0.0
    }
}

/// Elementwise soft threshold `(|b_i| - a)_+ sign(b_i)`.
pub fn prox_l1(b: &[f64], a: f64) -> Result<Vec<f64>> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("threshold must be finite and >= 0, got {a}")));
    }
    Ok(b.iter().map(|&v| soft_threshold(v, a)).collect())
}

/// Singular value shrinkage `U diag((sigma_i - lambda)_+) V^T`.
pub fn svd_shrink(y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("shrinkage level must be finite and >= 0, got {lambda}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SVD of a non-finite matrix".into()));
    }
    if y.is_empty() {
        return Ok(y.clone());
    }
    let svd = y
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut out = DMatrix::zeros(y.nrows(), y.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - lambda;
        if shrunk > 0.0 {
            out += u.column(i) * v_t.row(i) * shrunk;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(prox_l1(&[2.0, -0.5, 0.0], 1.0).unwrap(), vec![1.0, 0.0, 0.0]);
        let b = [0.3, -7.0, 1e-9];
        assert_eq!(prox_l1(&b, 0.0).unwrap(), b.to_vec());
        assert!(prox_l1(&b, -0.1).is_err());
    }

    /// Per-coordinate grid search of `0.5 (z - b)^2 + a |z|`.
    fn grid_prox(b: f64, a: f64) -> f64 {
        let lo = b.min(0.0) - 0.01;
        let hi = b.max(0.0) + 0.01;
        let steps = ((hi - lo) / 1e-4).ceil() as usize;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=steps {
            let z = lo + k as f64 * 1e-4;
            let f = 0.5 * (z - b) * (z - b) + a * z.abs();
            if f < best.0 {
                best = (f, z);
            }
        }
        // 0 is a kink; include it exactly
        if 0.5 * b * b < best.0 {
            best = (0.5 * b * b, 0.0);
        }
        best.1
    }

    #[test]
    fn prox_l1_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let b: Vec<f64> = (0..4).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let a = rng.random_range(0.0..1.5);
            let got = prox_l1(&b, a).unwrap();
            for (g, &bi) in got.iter().zip(&b) {
                assert!((g - grid_prox(bi, a)).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn svd_shrink_diag() {
        let y = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let out = svd_shrink(&y, 2.0).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((out - expect).amax() < 1e-12);
    }

    #[test]
    fn svd_shrink_zero_level_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert!((svd_shrink(&y, 0.0).unwrap() - &y).amax() < 1e-12);
    }

    #[test]
    fn svd_shrink_rejects_non_finite() {
        let mut y = DMatrix::zeros(2, 2);
        y[(0, 1)] = f64::NAN;
        assert!(matches!(svd_shrink(&y, 1.0), Err(Error::Numerical(_))));
    }

    /// Solves `min 0.5 ||Z - Y||_F^2 + lambda ||Z||_N` through the variational
    /// form `||Z||_N = min_{Z = A B^T} (||A||^2 + ||B||^2) / 2` by alternating
    /// ridge regressions; no SVD is involved.
    pub(crate) fn factorized_prox_oracle(y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let (m, n) = y.shape();
        let k = m.max(n);
        let mut a = DMatrix::from_fn(m, k, |i, j| y[(i, j % n)] + if i == j { 1.0 } else { 0.0 });
        let mut b = DMatrix::from_fn(n, k, |i, j| if i == j { 1.0 } else { 0.1 });
        let eye = DMatrix::<f64>::identity(k, k);
        let mut prev = &a * b.transpose();
        for _ in 0..200_000 {
            let btb = b.tr_mul(&b) + &eye * lambda;
            a = (y * &b) * btb.try_inverse().unwrap();
            let ata = a.tr_mul(&a) + &eye * lambda;
            b = (y.transpose() * &a) * ata.try_inverse().unwrap();
            let z = &a * b.transpose();
            let change = (&z - &prev).norm();
            prev = z;
            if change < 1e-14 {
                break;
            }
        }
        prev
    }

    #[test]
    fn svd_shrink_matches_factorized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let y = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let got = svd_shrink(&y, 0.7).unwrap();
            let oracle = factorized_prox_oracle(&y, 0.7);
            assert!((got - oracle).norm() <= 1e-5);
        }
    }

    proptest! {
        #[test]
        fn prox_l1_nonexpansive(
            pair in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
            a in 0.0f64..3.0,
        ) {
            let (b1, b2): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
            let p1 = prox_l1(&b1, a).unwrap();
            let p2 = prox_l1(&b2, a).unwrap();
            let d_out: f64 = p1.iter().zip(&p2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let d_in: f64 = b1.iter().zip(&b2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn svd_shrink_zero_iff_operator_norm_below_level(
            entries in proptest::collection::vec(-2.0f64..2.0, 6),
            lambda in 0.0f64..4.0,
        ) {
            let y = DMatrix::from_vec(3, 2, entries);
            let op = crate::model::singular_values(&y).unwrap().into_iter().fold(0.0, f64::max);
            let out = svd_shrink(&y, lambda).unwrap();
            let is_zero = out.amax() == 0.0;
            // avoid the knife edge where rounding decides
            if (op - lambda).abs() > 1e-9 {
                prop_assert_eq!(is_zero, op <= lambda);
            }
        }
    }
}
