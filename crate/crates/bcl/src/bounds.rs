//! Lower bounds on the class-specific batch-wise losses, the closed-form
//! whole-dataset bound with class-complement, and the numerical
//! equality-condition checks.
//!
//! Bounds are evaluated at tau = 1, matching the analysis that drops the
//! temperature. [`theorem3_bound_with_tau`] is an implementer-derived
//! extension for temperature-scaled runs.

use serde::Serialize;

use crate::embedding::UnitConfiguration;
use crate::error::{Error, Result};
use crate::longtail::Batch;
use crate::loss::{class_batch_loss, BatchLossKind};
use crate::simplex::{measure, SimplexReport};

/// Bound, loss, and their attraction/repulsion decomposition for one class
/// within one batch. `slack = loss - bound` is nonnegative (up to float
/// noise) whenever the bound's preconditions hold.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub bound: f64,
    pub loss: f64,
    pub slack: f64,
    pub attraction: f64,
    pub repulsion: f64,
    pub per_anchor_s: Vec<f64>,
}

impl BoundReport {
    fn trivial() -> Self {
        BoundReport {
            bound: 0.0,
            loss: 0.0,
            slack: 0.0,
            attraction: 0.0,
            repulsion: 0.0,
            per_anchor_s: Vec::new(),
        }
    }
}

/// Lower bound on the class-specific batch-wise SCL loss:
///
/// ```text
/// sum_{i in B_y} log( (|B_y|-1) + |B_y^C| exp(S_rep_i + S_att_i) )
/// ```
///
/// with `S_rep_i` the mean negative similarity and `S_att_i` minus the mean
/// positive similarity. When `|B_y| <= 1` both sides are 0 and the report is
/// all zeros.
pub fn theorem1_bound(z: &UnitConfiguration, batch: &Batch, y: usize) -> Result<BoundReport> {
    let anchors = match batch.per_class.get(&y) {
        Some(a) if a.len() > 1 => a.clone(),
        _ => return Ok(BoundReport::trivial()),
    };
    let m = anchors.len();
    let negatives: Vec<usize> = batch
        .indices
        .iter()
        .copied()
        .filter(|i| z.labels[*i] != y)
        .collect();
    let nc = negatives.len();

    let mut bound = 0.0;
    let mut attraction = 0.0;
    let mut repulsion = 0.0;
    let mut per_anchor_s = Vec::with_capacity(m);
    for &i in &anchors {
        let zi = z.z.row(i);
        let s_att = -anchors
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| zi.dot(&z.z.row(j)))
            .sum::<f64>()
            / (m - 1) as f64;
        let s_rep = if nc == 0 {
            0.0
        } else {
            negatives.iter().map(|&n| zi.dot(&z.z.row(n))).sum::<f64>() / nc as f64
        };
        let s = s_att + s_rep;
        attraction += s_att;
        repulsion += s_rep;
        per_anchor_s.push(s);
        bound += ((m - 1) as f64 + nc as f64 * s.exp()).ln();
    }
    let loss = class_batch_loss(z, batch, y, 1.0, BatchLossKind::Scl);
    Ok(BoundReport {
        bound,
        loss,
        slack: loss - bound,
        attraction,
        repulsion,
        per_anchor_s,
    })
}

/// Lower bound after class-averaging (the L1 form):
///
/// ```text
/// sum_{i in B_y} log( 1 + (|Y_B|-1) exp(S_rep_i + S_att_i) )
/// ```
///
/// where `S_rep_i` averages class-mean similarities over the other classes in
/// the batch. Undefined when `|Y_B| = 1`; all zeros when `|B_y| <= 1`.
pub fn theorem2_bound(z: &UnitConfiguration, batch: &Batch, y: usize) -> Result<BoundReport> {
    if batch.classes_present.len() <= 1 {
        return Err(Error::Undefined(
            "theorem 2 needs at least two classes in the batch".into(),
        ));
    }
    let anchors = match batch.per_class.get(&y) {
        Some(a) if a.len() > 1 => a.clone(),
        _ => return Ok(BoundReport::trivial()),
    };
    let m = anchors.len();
    let classes = batch.classes_present.len();

    let mut bound = 0.0;
    let mut attraction = 0.0;
    let mut repulsion = 0.0;
    let mut per_anchor_s = Vec::with_capacity(m);
    for &i in &anchors {
        let zi = z.z.row(i);
        let s_att = -anchors
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| zi.dot(&z.z.row(j)))
            .sum::<f64>()
            / (m - 1) as f64;
        let mut s_rep = 0.0;
        for (&q, members) in &batch.per_class {
            if q == y {
                continue;
            }
            s_rep += members.iter().map(|&k| zi.dot(&z.z.row(k))).sum::<f64>()
                / members.len() as f64;
        }
        s_rep /= (classes - 1) as f64;
        let s = s_att + s_rep;
        attraction += s_att;
        repulsion += s_rep;
        per_anchor_s.push(s);
        bound += (1.0 + (classes - 1) as f64 * s.exp()).ln();
    }
    let loss = class_batch_loss(z, batch, y, 1.0, BatchLossKind::L1);
    Ok(BoundReport {
        bound,
        loss,
        slack: loss - bound,
        attraction,
        repulsion,
        per_anchor_s,
    })
}

/// The whole-dataset lower bound with class-complement:
/// `|D| * log(1 + (K-1) exp(-K/(K-1)))`.
pub fn theorem3_bound(k: usize, dataset_size: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidK(k));
    }
    Ok(dataset_size as f64 * per_anchor_floor(k, 1.0))
}

/// Temperature-generalized variant `|D| * log(1 + (K-1) exp(-(K/(K-1))/tau))`.
/// Derived extension, not part of the tau-free analysis.
pub fn theorem3_bound_with_tau(k: usize, dataset_size: usize, tau: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidK(k));
    }
    Ok(dataset_size as f64 * per_anchor_floor(k, tau))
}

/// `log(1 + (K-1) exp(-(K/(K-1))/tau))`, the per-anchor floor of the
/// balanced loss.
pub fn per_anchor_floor(k: usize, tau: f64) -> f64 {
    let kf = k as f64;
    (1.0 + (kf - 1.0) * (-(kf / (kf - 1.0)) / tau).exp()).ln()
}

/// Residuals and pass/fail flags for the equality conditions: variability
/// collapse, equal class-mean norms, zero centroid, and equiangularity.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EqualityConditions {
    pub collapse_residual: f64,
    pub norm_residual: f64,
    pub centroid_norm: f64,
    pub equiangularity_spread: f64,
    pub collapse_ok: bool,
    pub equal_norm_ok: bool,
    pub centroid_ok: bool,
    pub equiangular_ok: bool,
    pub all_ok: bool,
    pub tol: f64,
}

/// Default tolerance for constructed equality cases.
pub const EQUALITY_TOL_EXACT: f64 = 1e-6;
/// Default tolerance for optimization-produced configurations.
pub const EQUALITY_TOL_TRAINED: f64 = 5e-2;

/// Checks the equality-attainment conditions of the whole-dataset bound
/// against the configuration's simplex residuals.
pub fn check_equality_conditions(z: &UnitConfiguration, tol: f64) -> Result<EqualityConditions> {
    let report: SimplexReport = measure(z)?;
    let collapse_ok = report.collapse_residual <= tol;
    let equal_norm_ok = report.norm_residual <= tol;
    let centroid_ok = report.centroid_norm <= tol;
    let equiangular_ok = report.gram_offdiag_spread <= tol;
    Ok(EqualityConditions {
        collapse_residual: report.collapse_residual,
        norm_residual: report.norm_residual,
        centroid_norm: report.centroid_norm,
        equiangularity_spread: report.gram_offdiag_spread,
        collapse_ok,
        equal_norm_ok,
        centroid_ok,
        equiangular_ok,
        all_ok: collapse_ok && equal_norm_ok && centroid_ok && equiangular_ok,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{normalize, PrototypeSet, RawConfiguration};
    use crate::loss::bcl_instance_loss;
    use crate::simplex::{build_regular_simplex, SimplexSpec};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(n: usize, h: usize, k: usize, rng: &mut ChaCha8Rng) -> UnitConfiguration {
        let w = Array2::from_shape_fn((n, h), |_| rng.gen_range(-1.0..1.0_f64) + 1e-3);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        normalize(&RawConfiguration::new(w, labels, k).unwrap()).unwrap()
    }

    fn collapsed_config(
        vertices: &Array2<f64>,
        counts: &[usize],
    ) -> UnitConfiguration {
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
    fn theorem1_equality_on_antipodal_collapse() {
        // all of class y at one point, all negatives at the antipode:
        // conditions Q1/Q2 hold and the bound is tight
        let mut z = Array2::zeros((7, 3));
        for i in 0..4 {
            z[[i, 0]] = 1.0;
        }
        for i in 4..7 {
            z[[i, 0]] = -1.0;
        }
        let z = UnitConfiguration::new(z, vec![0, 0, 0, 0, 1, 1, 1], 2).unwrap();
        let batch = Batch::full(&z.labels);
        let report = theorem1_bound(&z, &batch, 0).unwrap();
        assert!(report.slack.abs() <= 1e-9, "slack {}", report.slack);
    }

    #[test]
    fn theorem1_monte_carlo_nonnegative_slack() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for trial in 0..1000 {
            let n = rng.gen_range(8..=64);
            let k = rng.gen_range(2..=10);
            let h = rng.gen_range((k - 1).max(2)..=16);
            let z = random_config(n, h, k, &mut rng);
            let batch = Batch::full(&z.labels);
            let y = rng.gen_range(0..k);
            let report = theorem1_bound(&z, &batch, y).unwrap();
            assert!(report.slack >= -1e-9, "trial {trial}: slack {}", report.slack);
        }
    }

    #[test]
    fn theorem1_singleton_class_all_zero() {
        let mut z = Array2::zeros((3, 2));
        z[[0, 0]] = 1.0;
        z[[1, 1]] = 1.0;
        z[[2, 0]] = -1.0;
        let z = UnitConfiguration::new(z, vec![0, 1, 1], 2).unwrap();
        let batch = Batch::full(&z.labels);
        let report = theorem1_bound(&z, &batch, 0).unwrap();
        assert_eq!(report.bound, 0.0);
        assert_eq!(report.loss, 0.0);
        assert_eq!(report.slack, 0.0);
    }

    #[test]
    fn theorem2_equality_on_q1_q3_configuration() {
        // collapsed simplex satisfies Q1 (within-class products all equal) and
        // Q3 (cross-class products equal per anchor by symmetry)
        let vertices = build_regular_simplex(&SimplexSpec { k: 3, h: 4, rho: 1.0 }, 8).unwrap();
        let z = collapsed_config(&vertices, &[4, 3, 2]);
        let batch = Batch::full(&z.labels);
        for y in 0..3 {
            let report = theorem2_bound(&z, &batch, y).unwrap();
            assert!(report.slack.abs() <= 1e-9, "class {y}: slack {}", report.slack);
        }
    }

    #[test]
    fn theorem2_monte_carlo_nonnegative_slack() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for trial in 0..1000 {
            let n = rng.gen_range(8..=64);
            let k = rng.gen_range(2..=10);
            let h = rng.gen_range((k - 1).max(2)..=16);
            let z = random_config(n, h, k, &mut rng);
            let batch = Batch::full(&z.labels);
            let y = rng.gen_range(0..k);
            let report = theorem2_bound(&z, &batch, y).unwrap();
            assert!(report.slack >= -1e-9, "trial {trial}: slack {}", report.slack);
        }
    }

    #[test]
    fn theorem2_collapsed_simplex_per_anchor_s() {
        // equal class sizes collapsed to a K-simplex: S = -K/(K-1) per anchor
        for k in [2usize, 4, 6] {
            let vertices =
                build_regular_simplex(&SimplexSpec { k, h: k + 2, rho: 1.0 }, 17).unwrap();
            let z = collapsed_config(&vertices, &vec![3; k]);
            let batch = Batch::full(&z.labels);
            let report = theorem2_bound(&z, &batch, 0).unwrap();
            let expected = -(k as f64) / (k as f64 - 1.0);
            for s in &report.per_anchor_s {
                assert!((s - expected).abs() <= 1e-12, "K={k}: S={s}");
            }
        }
    }

    #[test]
    fn theorem2_single_class_undefined() {
        let mut z = Array2::zeros((3, 2));
        for i in 0..3 {
            z[[i, 0]] = 1.0;
        }
        let z = UnitConfiguration::new(z, vec![0, 0, 0], 1).unwrap();
        let batch = Batch::full(&z.labels);
        assert!(matches!(
            theorem2_bound(&z, &batch, 0),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn theorem3_reference_values() {
        let k2 = theorem3_bound(2, 1).unwrap();
        assert!((k2 - (1.0 + (-2.0_f64).exp()).ln()).abs() <= 1e-15);
        assert!((k2 - 0.126928).abs() <= 1e-6);
        let k4 = theorem3_bound(4, 1).unwrap();
        assert!((k4 - 0.5826577).abs() <= 1e-6);
        // linear in |D|
        let k4_100 = theorem3_bound(4, 100).unwrap();
        assert!((k4_100 - 100.0 * k4).abs() <= 1e-12);
        assert!(matches!(theorem3_bound(1, 5), Err(Error::InvalidK(1))));
    }

    #[test]
    fn theorem3_strictly_increasing_in_k() {
        let mut prev = theorem3_bound(2, 1).unwrap();
        for k in 3..=1000 {
            let cur = theorem3_bound(k, 1).unwrap();
            assert!(cur > prev, "K={k}: {cur} <= {prev}");
            prev = cur;
        }
    }

    #[test]
    fn bcl_equality_attainment_matches_theorem3() {
        // whole-dataset BCL loss on a variability-collapsed simplex with
        // matching prototypes equals the closed form within 1e-6 relative
        for k in [2usize, 4, 10] {
            let vertices =
                build_regular_simplex(&SimplexSpec { k, h: k + 4, rho: 1.0 }, 23).unwrap();
            let counts: Vec<usize> = (0..k).map(|c| (k - c).max(1)).collect();
            let z = collapsed_config(&vertices, &counts);
            let protos = PrototypeSet::new(vertices).unwrap();
            let batch = Batch::full(&z.labels);
            let total: f64 = batch
                .indices
                .iter()
                .map(|&i| bcl_instance_loss(&z, &batch, i, &protos, 1.0))
                .sum();
            let bound = theorem3_bound(k, z.n()).unwrap();
            assert!(
                ((total - bound) / bound).abs() <= 1e-6,
                "K={k}: total {total} vs bound {bound}"
            );
        }
    }

    #[test]
    fn tau_generalized_bound_matches_at_tau_one() {
        let a = theorem3_bound(7, 13).unwrap();
        let b = theorem3_bound_with_tau(7, 13, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equality_conditions_exact_and_perturbed() {
        let vertices = build_regular_simplex(&SimplexSpec { k: 5, h: 8, rho: 1.0 }, 3).unwrap();
        let z = collapsed_config(&vertices, &[4, 3, 3, 2, 2]);
        let exact = check_equality_conditions(&z, EQUALITY_TOL_EXACT).unwrap();
        assert!(exact.all_ok);
        assert!(exact.collapse_residual <= 1e-10);
        assert!(exact.equiangularity_spread <= 1e-10);

        // random configuration: collapse residual far above tolerance
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let random = random_config(30, 8, 5, &mut rng);
        let rnd = check_equality_conditions(&random, EQUALITY_TOL_EXACT).unwrap();
        assert!(!rnd.collapse_ok);

        // noise-perturbed simplex: residuals scale with sigma
        let residual_at = |sigma: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut noisy = z.z.clone();
            for mut row in noisy.rows_mut() {
                for x in row.iter_mut() {
                    *x += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                let norm = crate::embedding::l2_norm(row.view());
                row.mapv_inplace(|v| v / norm);
            }
            let cfg = UnitConfiguration::new(noisy, z.labels.clone(), 5).unwrap();
            check_equality_conditions(&cfg, EQUALITY_TOL_TRAINED)
                .unwrap()
                .collapse_residual
        };
        let r1 = residual_at(0.01);
        let r2 = residual_at(0.02);
        let ratio = r2 / r1;
        assert!(ratio > 1.4 && ratio < 2.8, "ratio {ratio}");
    }
}
