//! Top-2 principal components by power iteration with deflation.

use super::Rng;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const TOLERANCE: f64 = 1e-8;
const MAX_ITERS: usize = 1000;
const START_SEED: u64 = 0x0005_CA1A_B1E0;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    /// Per-row coordinates on the two principal axes.
    pub projection: Vec<[f64; 2]>,
    /// Variances along the axes, descending and non-negative.
    pub eigenvalues: [f64; 2],
    pub axes: [Vec<f64>; 2],
}

/// Projects `rows` onto their two leading principal axes.
///
/// Uses the population covariance (divisor `n`). Axis signs are chosen so the
/// largest-magnitude component of each axis is positive.
pub fn pca2(rows: &Matrix) -> Result<Pca2> {
    let (n, d) = (rows.rows(), rows.cols());
    if n < 3 {
        return Err(Error::invalid(format!("pca2 needs at least 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::invalid("pca2 needs at least 2 columns"));
    }

    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(rows.row(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| rows.row(i).iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();

    let mut cov = vec![vec![0.0f64; d]; d];
    for r in &centered {
        for a in 0..d {
            for b in a..d {
                cov[a][b] += r[a] * r[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= n as f64;
            cov[b][a] = cov[a][b];
        }
    }

    let scale = (0..d).map(|a| cov[a][a]).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut rng = Rng::new(START_SEED);

    let start: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
    let (l1, mut v1) = power_iterate(&cov, start, None, scale)?;

    let mut deflated = cov.clone();
    for a in 0..d {
        for b in 0..d {
            deflated[a][b] -= l1 * v1[a] * v1[b];
        }
    }
    let start: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
    let (l2, mut v2) = power_iterate(&deflated, start, Some(&v1), scale)?;

    canonicalize_sign(&mut v1);
    canonicalize_sign(&mut v2);

    let projection = centered
        .iter()
        .map(|r| [dot(r, &v1), dot(r, &v2)])
        .collect();

    let (l1, l2) = (l1.max(0.0), l2.max(0.0));
    Ok(Pca2 {
        projection,
        eigenvalues: [l1, l2.min(l1)],
        axes: [v1, v2],
    })
}

fn power_iterate(
    m: &[Vec<f64>],
    mut v: Vec<f64>,
    orthogonal_to: Option<&[f64]>,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let project_out = |v: &mut Vec<f64>| {
        if let Some(u) = orthogonal_to {
            let c = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
        }
    };
    project_out(&mut v);
    normalize(&mut v);

    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(m, &v);
        project_out(&mut w);
        let norm = dot(&w, &w).sqrt();
        if norm <= 1e-12 * scale {
            // Null direction; eigenvalue is zero and any unit vector in the
            // remaining space is an eigenvector.
            return Ok((0.0, v));
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let c = dot(&v, &w).abs();
        let lambda = dot(&w, &mat_vec(m, &w));
        residual = 1.0 - c;
        v = w;
        if residual < TOLERANCE {
            return Ok((lambda, v));
        }
    }
    Err(Error::ConvergenceFailure { residual })
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn canonicalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Exact eigenvalues of a symmetric 2x2 matrix.
    fn eig2(a: f64, b: f64, c: f64) -> (f64, f64) {
        let tr = a + c;
        let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
        (tr / 2.0 + disc, tr / 2.0 - disc)
    }

    #[test]
    fn diagonal_covariance_aligns_with_axes() {
        // Population covariance of these four points is diag(4, 1).
        let rows = Matrix::from_rows(&[
            vec![2.0, 1.0],
            vec![-2.0, 1.0],
            vec![2.0, -1.0],
            vec![-2.0, -1.0],
        ])
        .unwrap();
        let p = pca2(&rows).unwrap();
        // The stopping rule fixes axes to about 1e-4 rad; Rayleigh quotients
        // are accurate to the square of that.
        assert_abs_diff_eq!(p.eigenvalues[0], 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.eigenvalues[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.axes[0][0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.axes[1][1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.projection[1][0], -2.0, epsilon = 1e-4);
    }

    #[test]
    fn isotropic_cloud_matches_direct_solver() {
        let mut rng = Rng::new(77);
        let n = 10_000;
        let data: Vec<Vec<f32>> = (0..n)
            .map(|_| vec![rng.gaussian() as f32, rng.gaussian() as f32])
            .collect();
        let p = pca2(&Matrix::from_rows(&data).unwrap()).unwrap();

        let mut m = [0.0f64; 2];
        for r in &data {
            m[0] += r[0] as f64;
            m[1] += r[1] as f64;
        }
        m.iter_mut().for_each(|x| *x /= n as f64);
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for r in &data {
            let (x, y) = (r[0] as f64 - m[0], r[1] as f64 - m[1]);
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
        }
        let (e1, e2) = eig2(sxx / n as f64, sxy / n as f64, syy / n as f64);
        // A near-degenerate spectrum converges slowly, so the successive-vector
        // stopping rule leaves a larger error here.
        assert_abs_diff_eq!(p.eigenvalues[0], e1, epsilon = 1e-4 * e1);
        assert_abs_diff_eq!(p.eigenvalues[1], e2, epsilon = 1e-4 * e1);
        // Sampling noise at n = 10k keeps the ratio well within 10% of 1.
        let ratio = p.eigenvalues[1] / p.eigenvalues[0];
        assert!(ratio > 0.9 && ratio <= 1.0, "ratio {ratio}");
    }

    #[test]
    fn duplicating_rows_leaves_projection_unchanged() {
        let mut rng = Rng::new(3);
        let data: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..5).map(|_| rng.gaussian() as f32).collect())
            .collect();
        let once = pca2(&Matrix::from_rows(&data).unwrap()).unwrap();
        let twice_rows: Vec<Vec<f32>> = data.iter().chain(&data).cloned().collect();
        let twice = pca2(&Matrix::from_rows(&twice_rows).unwrap()).unwrap();
        for i in 0..20 {
            for k in 0..2 {
                assert_abs_diff_eq!(once.projection[i][k], twice.projection[i][k], epsilon = 1e-6);
                assert_abs_diff_eq!(once.projection[i][k], twice.projection[i + 20][k], epsilon = 1e-6);
            }
        }
        assert_abs_diff_eq!(once.eigenvalues[0], twice.eigenvalues[0], epsilon = 1e-9);
    }

    #[test]
    fn first_axis_carries_more_variance() {
        let mut rng = Rng::new(11);
        let data: Vec<Vec<f32>> = (0..200)
            .map(|_| {
                let a = rng.gaussian() as f32;
                vec![3.0 * a, a + 0.5 * rng.gaussian() as f32, rng.gaussian() as f32]
            })
            .collect();
        let p = pca2(&Matrix::from_rows(&data).unwrap()).unwrap();
        let var = |k: usize| p.projection.iter().map(|r| r[k] * r[k]).sum::<f64>() / 200.0;
        assert!(var(0) >= var(1));
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
    }

    #[test]
    fn rank_one_data_has_zero_second_eigenvalue() {
        let rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let p = pca2(&rows).unwrap();
        assert!(p.eigenvalues[1].abs() < 1e-9);
    }

    #[test]
    fn too_few_rows() {
        let rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(pca2(&rows), Err(Error::InvalidInput(_))));
    }
}
