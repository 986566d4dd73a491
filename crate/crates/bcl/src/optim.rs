//! SGD harness over the raw embedding parameters: projected gradients,
//! optional momentum, a cosine learning-rate schedule, periodic geometry
//! measurements, and a two-loss comparison runner.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::per_anchor_floor;
use crate::embedding::{normalize, PrototypeSet, RawConfiguration};
use crate::error::{Error, Result};
use crate::grad::{class_balanced_gradient, combined_gradient, BalancedObjective, GradientField};
use crate::longtail::{class_counts, init_embeddings, sample_batch, Batch, LongTailSpec};
use crate::loss::{
    class_balanced_loss, combined_loss, BatchLossKind, ClassifierWeights, LossParams,
};
use crate::simplex::{measure, SimplexReport};

/// Which loss drives the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Scl,
    L1,
    L2,
    L3,
    Bcl,
    Combined,
}

impl LossVariant {
    fn uses_prototypes(self) -> bool {
        matches!(self, LossVariant::L3 | LossVariant::Bcl | LossVariant::Combined)
    }
}

/// Learning-rate schedule over the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `final_factor * base` at the last
    /// step.
    Cosine { final_factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_factor } => {
                if total_steps <= 1 {
                    return base;
                }
                let t = step as f64 / (total_steps - 1) as f64;
                let lo = base * final_factor;
                lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn default_momentum() -> f64 {
    0.0
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn default_lambda() -> f64 {
    2.0
}

fn default_mu() -> f64 {
    0.6
}

/// Full description of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    pub tau: f64,
    /// Weight of the compensated cross-entropy term; only the combined
    /// variant reads it.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the contrastive term in the combined variant.
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub seed: u64,
    pub measure_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be a positive finite number (got {})",
                self.lr
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0 (got {})", self.tau)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 (got {})",
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be a finite non-negative number (got {})",
                self.lambda
            )));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!(
                "mu must be a finite non-negative number (got {})",
                self.mu
            )));
        }
        if self.measure_every == 0 {
            return Err(Error::Config("measure_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1) (got {})",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One geometry snapshot along a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub step: usize,
    /// Class-balanced mean per-anchor loss over the full dataset (the
    /// combined variant reports its batch-mean objective instead).
    pub loss: f64,
    /// `loss - per-anchor lower bound` for the balanced variant; NaN for the
    /// others, which have no per-anchor floor of that form.
    pub bound_slack: f64,
    #[serde(flatten)]
    pub geometry: SimplexReport,
}

/// Everything a run produced: snapshots plus final state.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub measurements: Vec<Measurement>,
    pub final_raw: RawConfiguration,
    pub final_protos: Option<Array2<f64>>,
    pub final_classifier: Option<Array2<f64>>,
    pub counts: Vec<usize>,
}

impl TrainTrace {
    pub fn final_measurement(&self) -> &Measurement {
        self.measurements.last().expect("trace has a step-0 entry")
    }

    /// CSV rendering with full-precision floats so reruns compare
    /// byte-for-byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,loss,bound_slack,collapse_residual,norm_residual,centroid_norm,gram_offdiag_mean,gram_offdiag_spread\n",
        );
        for m in &self.measurements {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                m.step,
                m.loss,
                m.bound_slack,
                m.geometry.collapse_residual,
                m.geometry.norm_residual,
                m.geometry.centroid_norm,
                m.geometry.gram_offdiag_mean,
                m.geometry.gram_offdiag_spread,
            ));
        }
        out
    }
}

struct SgdState {
    velocity: Array2<f64>,
}

impl SgdState {
    fn apply(&mut self, p: &mut Array2<f64>, g: &Array2<f64>, lr: f64, momentum: f64) {
        if momentum > 0.0 {
            self.velocity.zip_mut_with(g, |v, &gi| *v = momentum * *v + gi);
            p.zip_mut_with(&self.velocity, |pi, &v| *pi -= lr * v);
        } else {
            p.zip_mut_with(g, |pi, &gi| *pi -= lr * gi);
        }
    }
}

/// Gradient of one training step. For the contrastive variants this is the
/// class-balanced batch objective; the combined variant differentiates its
/// own batch mean and also returns the classifier gradient.
fn batch_gradient(
    raw: &RawConfiguration,
    batch: &Batch,
    protos: Option<&Array2<f64>>,
    classifier: Option<&ClassifierWeights>,
    cfg: &TrainConfig,
) -> Result<(GradientField, Option<Array2<f64>>)> {
    let objective = match cfg.variant {
        LossVariant::Scl => BalancedObjective::Scl,
        LossVariant::L1 => BalancedObjective::L1,
        LossVariant::L2 => BalancedObjective::L2,
        LossVariant::L3 => BalancedObjective::L3,
        LossVariant::Bcl => BalancedObjective::Bcl,
        LossVariant::Combined => {
            let params = LossParams {
                tau: cfg.tau,
                lambda: cfg.lambda,
                mu: cfg.mu,
            };
            let (_, field, d_classifier) = combined_gradient(
                raw,
                batch,
                protos.expect("combined needs prototypes"),
                classifier.expect("combined needs a classifier"),
                &params,
            )?;
            return Ok((field, Some(d_classifier)));
        }
    };
    let field = class_balanced_gradient(raw, batch, protos, objective, cfg.tau)?;
    Ok((field, None))
}

/// Class-balanced mean per-anchor loss of the chosen variant over the full
/// dataset; the combined variant reports its batch-mean objective.
fn dataset_loss(
    raw: &RawConfiguration,
    protos: Option<&Array2<f64>>,
    classifier: Option<&ClassifierWeights>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let z = normalize(raw)?;
    let batch = Batch::full(&raw.labels);
    let proto_set = match protos {
        Some(p) => Some(PrototypeSet::from_raw(p)?),
        None => None,
    };
    let kind = match cfg.variant {
        LossVariant::Scl => BatchLossKind::Scl,
        LossVariant::L1 => BatchLossKind::L1,
        LossVariant::L2 => BatchLossKind::L2,
        LossVariant::L3 => BatchLossKind::L3(proto_set.as_ref().expect("protos")),
        LossVariant::Bcl => BatchLossKind::Bcl(proto_set.as_ref().expect("protos")),
        LossVariant::Combined => {
            let params = LossParams {
                tau: cfg.tau,
                lambda: cfg.lambda,
                mu: cfg.mu,
            };
            return Ok(combined_loss(
                &z,
                &batch,
                proto_set.as_ref().expect("protos"),
                classifier.expect("classifier"),
                &params,
            )?
            .total);
        }
    };
    class_balanced_loss(&z, &batch, cfg.tau, kind)
}

fn snapshot(
    step: usize,
    raw: &RawConfiguration,
    protos: Option<&Array2<f64>>,
    classifier: Option<&ClassifierWeights>,
    cfg: &TrainConfig,
) -> Result<Measurement> {
    let z = normalize(raw)?;
    let loss = dataset_loss(raw, protos, classifier, cfg)?;
    let bound_slack = match cfg.variant {
        LossVariant::Bcl => loss - per_anchor_floor(raw.k, cfg.tau),
        _ => f64::NAN,
    };
    Ok(Measurement {
        step,
        loss,
        bound_slack,
        geometry: measure(&z)?,
    })
}

/// Runs SGD on the chosen loss over a synthetic long-tail dataset.
///
/// Embeddings (and, for the balanced variant, prototypes) start as seeded
/// standard normals. Geometry and full-dataset loss are measured at step 0,
/// every `measure_every` steps, and at the final step. Divergence — a
/// non-finite loss or one exceeding 1e6 — aborts with [`Error::Diverged`];
/// the trace up to the previous measurement is lost, by design: a diverged
/// run's parameters are not meaningful.
pub fn train(spec: &LongTailSpec, h: usize, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let counts = class_counts(spec)?;
    let n: usize = counts.iter().sum();
    if cfg.batch_size > n {
        return Err(Error::BatchTooLarge {
            requested: cfg.batch_size,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut raw = init_embeddings(&counts, h, &mut rng)?;
    let mut protos = cfg.variant.uses_prototypes().then(|| {
        Array2::from_shape_fn((spec.k, h), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    });
    let mut classifier = match cfg.variant {
        LossVariant::Combined => {
            let w = Array2::from_shape_fn((spec.k, h), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.1
            });
            let priors: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
            Some(ClassifierWeights::new(w, priors)?)
        }
        _ => None,
    };

    let mut w_state = SgdState {
        velocity: Array2::zeros(raw.w.dim()),
    };
    let mut p_state = SgdState {
        velocity: Array2::zeros((spec.k, h)),
    };
    let mut c_state = SgdState {
        velocity: Array2::zeros((spec.k, h)),
    };

    let mut measurements = vec![snapshot(0, &raw, protos.as_ref(), classifier.as_ref(), cfg)?];

    // a numeric blowup mid-run is a divergence, not a config problem
    let as_diverged = |step: usize, e: Error| match e {
        Error::NonFinite(_) | Error::ZeroVector { .. } => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    };

    for step in 0..cfg.steps {
        let batch = sample_batch(&raw.labels, cfg.batch_size, &mut rng)?;
        let (field, d_classifier) =
            batch_gradient(&raw, &batch, protos.as_ref(), classifier.as_ref(), cfg)
                .map_err(|e| as_diverged(step, e))?;
        let lr = cfg.schedule.rate(cfg.lr, step, cfg.steps);
        w_state.apply(&mut raw.w, &field.dw, lr, cfg.momentum);
        if let (Some(p), Some(dp)) = (protos.as_mut(), field.dproto.as_ref()) {
            p_state.apply(p, dp, lr, cfg.momentum);
        }
        if let (Some(cls), Some(dc)) = (classifier.as_mut(), d_classifier.as_ref()) {
            c_state.apply(&mut cls.w, dc, lr, cfg.momentum);
        }

        let done = step + 1 == cfg.steps;
        if (step + 1) % cfg.measure_every == 0 || done {
            let m = snapshot(step + 1, &raw, protos.as_ref(), classifier.as_ref(), cfg)
                .map_err(|e| as_diverged(step + 1, e))?;
            if !m.loss.is_finite() || m.loss > 1e6 {
                return Err(Error::Diverged {
                    step: step + 1,
                    loss: m.loss,
                });
            }
            measurements.push(m);
        }
    }

    Ok(TrainTrace {
        measurements,
        final_raw: raw,
        final_protos: protos,
        final_classifier: classifier.map(|c| c.w),
        counts,
    })
}

/// Two traces over the same data spec, for geometry comparison.
#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub trace_a: TrainTrace,
    pub trace_b: TrainTrace,
}

/// Runs two configurations on the same long-tail spec (each run seeds its own
/// generator, so identical `seed` fields give identical data and batches).
pub fn compare_geometries(
    spec: &LongTailSpec,
    h: usize,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
) -> Result<ComparisonOutcome> {
    Ok(ComparisonOutcome {
        trace_a: train(spec, h, cfg_a)?,
        trace_b: train(spec, h, cfg_b)?,
    })
}
