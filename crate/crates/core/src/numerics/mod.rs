//! Small deterministic numeric kernel: softmax, cosine similarity, PRNG and
//! a two-component PCA.

mod pca;
mod rng;

pub use pca::{pca2, Pca2};
pub use rng::{child_seed, gaussian, Rng};

use crate::error::{Error, Result};

/// Numerically stable softmax of one row.
pub fn softmax_row(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("softmax of an empty row"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains NaN or Inf"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// In-place `f32` softmax over a row that is already known to be finite.
/// Used on the hot path of the toy decoder.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cosine similarity, accumulated in `f64`.
///
/// Computed as `dot / sqrt(|u|² |v|²)` so that `cosine(v, v)` is exactly 1.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("zero vector in cosine".into()));
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for (got, want) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-5);
        }
        let shifted = softmax_row(&[1e3, 1e3 + 1.5]).unwrap();
        let base = softmax_row(&[0.0, 1.5]).unwrap();
        for (a, b) in shifted.iter().zip(&base) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax_row(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax_row(&[1.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax_row(&[f64::INFINITY]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8, epsilon = 1e-12);
        let v = [0.3f32, -1.7, 2.9, 1e-3];
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_preserves_order(xs in prop::collection::vec(-50.0f64..50.0, 1..32)) {
            let p = softmax_row(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-10.0f32..10.0, 4),
            v in prop::collection::vec(-10.0f32..10.0, 4),
            alpha in 0.5f32..4.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let c = cosine(&u, &v).unwrap();
            prop_assert_eq!(c, cosine(&v, &u).unwrap());
            let scaled: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &v).unwrap() - c).abs() < 1e-5);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
