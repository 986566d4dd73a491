//! Exact regular simplex construction and deviation metrics for learned
//! configurations.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{class_mean_directions, l2_norm, UnitConfiguration};
use crate::error::{Error, Result};

/// Vertex count, ambient dimension, and radius of a regular simplex.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimplexSpec {
    pub k: usize,
    pub h: usize,
    pub rho: f64,
}

/// How far a configuration is from a variability-collapsed regular simplex.
///
/// * `collapse_residual` — max over instances of the distance to the
///   instance's class mean direction.
/// * `norm_residual` — max over classes of `| ||mean_k|| - 1 |` for the raw
///   (unnormalized) class means.
/// * `centroid_norm` — `|| sum_k dir_k || / K` over class mean directions.
/// * `gram_offdiag_mean` / `gram_offdiag_spread` — mean and max-minus-min of
///   the off-diagonal inner products of the class mean directions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimplexReport {
    pub collapse_residual: f64,
    pub norm_residual: f64,
    pub centroid_norm: f64,
    pub gram_offdiag_mean: f64,
    pub gram_offdiag_spread: f64,
}

/// K unit vectors in R^h with pairwise inner products -1/(K-1) and zero
/// centroid, rotated into R^h by a seeded random orthonormal embedding.
///
/// Construction: the rows of the Helmert matrix are the coordinates of the
/// centered standard basis of R^K in an orthonormal basis of its sum-zero
/// subspace; scaling them to unit norm gives the simplex in R^(K-1).
pub fn build_regular_simplex(spec: &SimplexSpec, seed: u64) -> Result<Array2<f64>> {
    let (k, h) = (spec.k, spec.h);
    if k > h + 1 {
        return Err(Error::DimensionTooSmall { k, h });
    }
    if k == 1 {
        // degenerate single vertex: a seeded random unit direction
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array1::from_shape_fn(h, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = l2_norm(v.view());
        v.mapv_inplace(|x| spec.rho * x / norm);
        return Ok(v.insert_axis(Axis(0)));
    }
    // Helmert rows: coords[i][j] for j in 1..K is the i-th entry of the j-th
    // Helmert vector (j ones then -j, scaled to unit norm).
    let dim = k - 1;
    let mut coords = Array2::<f64>::zeros((k, dim));
    for j in 1..k {
        let scale = 1.0 / ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            coords[[i, j - 1]] = scale;
        }
        coords[[j, j - 1]] = -(j as f64) * scale;
    }
    // unit-scale: each row has norm sqrt(1 - 1/K)
    let row_norm = (1.0 - 1.0 / k as f64).sqrt();
    coords.mapv_inplace(|x| x / row_norm);

    let basis = random_orthonormal_columns(h, dim, seed);
    // vertex_i = rho * basis . coords_i
    Ok(spec.rho * coords.dot(&basis.t()))
}

/// h x d matrix with orthonormal columns from a seeded Gaussian draw,
/// orthonormalized by two passes of modified Gram-Schmidt.
fn random_orthonormal_columns(h: usize, d: usize, seed: u64) -> Array2<f64> {
    assert!(d <= h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::from_shape_fn((h, d), |_| rng.sample::<f64, _>(StandardNormal));
    for _pass in 0..2 {
        for j in 0..d {
            for prev in 0..j {
                let proj = q.column(j).dot(&q.column(prev));
                let prev_col = q.column(prev).to_owned();
                let mut col = q.column_mut(j);
                col.zip_mut_with(&prev_col, |c, &p| *c -= proj * p);
            }
            let norm = l2_norm(q.column(j));
            q.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
    q
}

/// Measures variability collapse, equi-norm, zero-centroid, and
/// equiangularity residuals of a configuration.
pub fn measure(z: &UnitConfiguration) -> Result<SimplexReport> {
    let dirs = class_mean_directions(z)?;
    let k = z.k;
    let h = z.h();

    // raw class means for the equal-norm residual
    let mut sums = Array2::<f64>::zeros((k, h));
    let mut counts = vec![0usize; k];
    for (i, &y) in z.labels.iter().enumerate() {
        let mut row = sums.row_mut(y);
        row += &z.z.row(i);
        counts[y] += 1;
    }
    let mut norm_residual = 0.0_f64;
    for c in 0..k {
        let mean_norm = l2_norm(sums.row(c)) / counts[c] as f64;
        norm_residual = norm_residual.max((mean_norm - 1.0).abs());
    }

    let mut collapse_residual = 0.0_f64;
    for (i, &y) in z.labels.iter().enumerate() {
        let diff = &z.z.row(i) - &dirs.row(y);
        collapse_residual = collapse_residual.max(l2_norm(diff.view()));
    }

    let centroid = dirs.sum_axis(Axis(0));
    let centroid_norm = l2_norm(centroid.view()) / k as f64;

    let (mut min_d, mut max_d, mut sum_d, mut pairs) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for a in 0..k {
        for b in (a + 1)..k {
            let d = dirs.row(a).dot(&dirs.row(b));
            min_d = min_d.min(d);
            max_d = max_d.max(d);
            sum_d += d;
            pairs += 1;
        }
    }
    let (gram_offdiag_mean, gram_offdiag_spread) = if pairs == 0 {
        (0.0, 0.0)
    } else {
        (sum_d / pairs as f64, max_d - min_d)
    };

    Ok(SimplexReport {
        collapse_residual,
        norm_residual,
        centroid_norm,
        gram_offdiag_mean,
        gram_offdiag_spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn spec(k: usize, h: usize) -> SimplexSpec {
        SimplexSpec { k, h, rho: 1.0 }
    }

    fn config_at_vertices(vertices: &Array2<f64>, counts: &[usize]) -> UnitConfiguration {
        let h = vertices.ncols();
        let n: usize = counts.iter().sum();
        let mut z = Array2::zeros((n, h));
        let mut labels = Vec::new();
        let mut row = 0;
        for (c, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                z.row_mut(row).assign(&vertices.row(c));
                labels.push(c);
                row += 1;
            }
        }
        UnitConfiguration::new(z, labels, counts.len()).unwrap()
    }

    #[test]
    fn antipodal_pair_k2_h1() {
        let v = build_regular_simplex(&spec(2, 1), 3).unwrap();
        let a = v[[0, 0]];
        let b = v[[1, 0]];
        assert!((a.abs() - 1.0).abs() <= 1e-14);
        assert!((a + b).abs() <= 1e-14);
        assert!((a * b + 1.0).abs() <= 1e-14);
    }

    #[test]
    fn mercedes_k3_h2() {
        let v = build_regular_simplex(&spec(3, 2), 4).unwrap();
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d = v.row(a).dot(&v.row(b));
                assert!((d + 0.5).abs() <= 1e-13, "pair ({a},{b}): {d}");
            }
        }
    }

    #[test]
    fn k10_h16_gram_and_centroid() {
        let v = build_regular_simplex(&spec(10, 16), 5).unwrap();
        for a in 0..10 {
            assert!((l2_norm(v.row(a)) - 1.0).abs() <= 1e-13);
            for b in (a + 1)..10 {
                let d = v.row(a).dot(&v.row(b));
                assert!((d + 1.0 / 9.0).abs() <= 1e-12);
            }
        }
        let centroid = v.sum_axis(Axis(0));
        assert!(l2_norm(centroid.view()) <= 1e-12);
    }

    #[test]
    fn definition_conditions_up_to_k100() {
        for k in [2usize, 5, 17, 50, 100] {
            let h = k + 3;
            let v = build_regular_simplex(&spec(k, h), 99).unwrap();
            let target = -1.0 / (k as f64 - 1.0);
            for a in 0..k {
                assert!((l2_norm(v.row(a)) - 1.0).abs() <= 1e-12);
                for b in (a + 1)..k {
                    assert!((v.row(a).dot(&v.row(b)) - target).abs() <= 1e-12, "K={k}");
                }
            }
            assert!(l2_norm(v.sum_axis(Axis(0)).view()) <= 1e-12, "K={k}");
        }
    }

    #[test]
    fn dimension_too_small() {
        assert!(matches!(
            build_regular_simplex(&spec(5, 3), 0),
            Err(Error::DimensionTooSmall { k: 5, h: 3 })
        ));
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = build_regular_simplex(&spec(6, 9), 21).unwrap();
        let b = build_regular_simplex(&spec(6, 9), 21).unwrap();
        assert_eq!(a, b);
        let c = build_regular_simplex(&spec(6, 9), 22).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn measure_exact_simplex_zero_residuals() {
        let v = build_regular_simplex(&spec(4, 6), 1).unwrap();
        let z = config_at_vertices(&v, &[3, 2, 2, 1]);
        let report = measure(&z).unwrap();
        assert!(report.collapse_residual <= 1e-10);
        assert!(report.norm_residual <= 1e-10);
        assert!(report.centroid_norm <= 1e-10);
        assert!((report.gram_offdiag_mean + 1.0 / 3.0).abs() <= 1e-10);
        assert!(report.gram_offdiag_spread <= 1e-10);
    }

    #[test]
    fn measure_degenerate_two_classes_same_point() {
        let mut v = build_regular_simplex(&spec(3, 4), 2).unwrap();
        let row0 = v.row(0).to_owned();
        v.row_mut(1).assign(&row0); // classes 0 and 1 collapse together
        let z = config_at_vertices(&v, &[2, 2, 2]);
        let report = measure(&z).unwrap();
        let max_pair = 1.0; // the coincident pair has inner product 1
        assert!((report.gram_offdiag_spread - (max_pair - (-0.5))).abs() <= 1e-10);
    }

    #[test]
    fn measure_empty_class_errors() {
        let v = build_regular_simplex(&spec(2, 3), 0).unwrap();
        let z = UnitConfiguration::new(v.row(0).to_owned().insert_axis(Axis(0)), vec![0], 2).unwrap();
        assert!(matches!(measure(&z), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn collapse_residual_grows_with_noise() {
        let v = build_regular_simplex(&spec(5, 8), 6).unwrap();
        let mut residuals = Vec::new();
        for &sigma in &[0.01, 0.05, 0.1] {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let counts = [10usize, 8, 6, 4, 2];
            let base = config_at_vertices(&v, &counts);
            let mut noisy = base.z.clone();
            for mut row in noisy.rows_mut() {
                for x in row.iter_mut() {
                    *x += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                let norm = l2_norm(row.view());
                row.mapv_inplace(|x| x / norm);
            }
            let z = UnitConfiguration::new(noisy, base.labels.clone(), 5).unwrap();
            residuals.push(measure(&z).unwrap().collapse_residual);
        }
        assert!(residuals[0] < residuals[1] && residuals[1] < residuals[2]);
        // residuals roughly proportional to sigma: 5x noise, ratio in [2, 12]
        let ratio = residuals[1] / residuals[0];
        assert!(ratio > 2.0 && ratio < 12.0, "ratio {ratio}");
    }

    #[test]
    fn measure_invariant_under_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 6;
        let rotation = random_orthonormal_columns(h, h, 123);
        let v = build_regular_simplex(&spec(4, h), 9).unwrap();
        let counts = [4usize, 3, 2, 1];
        let base = config_at_vertices(&v, &counts);
        // add a bit of noise so residuals are nonzero
        let mut noisy = base.z.clone();
        for mut row in noisy.rows_mut() {
            for x in row.iter_mut() {
                *x += 0.05 * rng.gen_range(-1.0..1.0);
            }
            let norm = l2_norm(row.view());
            row.mapv_inplace(|x| x / norm);
        }
        let z = UnitConfiguration::new(noisy.clone(), base.labels.clone(), 4).unwrap();
        let rotated =
            UnitConfiguration::new(noisy.dot(&rotation.t()), base.labels.clone(), 4).unwrap();
        let a = measure(&z).unwrap();
        let b = measure(&rotated).unwrap();
        assert!((a.collapse_residual - b.collapse_residual).abs() <= 1e-10);
        assert!((a.norm_residual - b.norm_residual).abs() <= 1e-10);
        assert!((a.centroid_norm - b.centroid_norm).abs() <= 1e-10);
        assert!((a.gram_offdiag_mean - b.gram_offdiag_mean).abs() <= 1e-10);
        assert!((a.gram_offdiag_spread - b.gram_offdiag_spread).abs() <= 1e-10);
    }

    #[test]
    fn zero_centroid_forces_mean_offdiag() {
        // for unit vectors with zero centroid the mean off-diagonal inner
        // product must be -1/(K-1)
        for k in [3usize, 7, 12] {
            let v = build_regular_simplex(&spec(k, k + 1), 31).unwrap();
            let z = config_at_vertices(&v, &vec![2; k]);
            let report = measure(&z).unwrap();
            assert!((report.gram_offdiag_mean + 1.0 / (k as f64 - 1.0)).abs() <= 1e-10);
        }
    }
}
