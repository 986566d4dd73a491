//! Contrastive loss kernels: supervised contrastive loss, the three
//! class-averaging forms, the balanced contrastive loss with class-complement
//! prototypes, logit-compensated cross-entropy, and the combined objective.
//!
//! Every kernel is a pure scalar function of a [`UnitConfiguration`]. All
//! softmax denominators go through max-subtracted log-sum-exp so values stay
//! finite for similarities spanning [-1, 1]/tau down to tau = 0.05.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embedding::{PrototypeSet, UnitConfiguration};
use crate::error::{Error, Result};
use crate::longtail::Batch;

/// Temperature and mixing weights of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossParams {
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        // training defaults: lambda = 2.0, mu = 0.6, tau = 0.1
        LossParams {
            tau: 0.1,
            lambda: 2.0,
            mu: 0.6,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0 (got {})", self.tau)));
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::Config("lambda and mu must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear classifier on embeddings plus the class priors used for logit
/// compensation.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    pub w: Array2<f64>,
    pub priors: Vec<f64>,
}

impl ClassifierWeights {
    pub fn new(w: Array2<f64>, priors: Vec<f64>) -> Result<Self> {
        if priors.len() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} priors for {} classifier rows",
                priors.len(),
                w.nrows()
            )));
        }
        if priors.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("priors must be strictly positive".into()));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!("priors sum to {sum}, not 1")));
        }
        Ok(Self { w, priors })
    }

    /// Priors proportional to per-class sample counts.
    pub fn priors_from_counts(counts: &[usize]) -> Vec<f64> {
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Total plus per-anchor and attraction/repulsion decomposition of a batch
/// loss. `attraction` is the (scaled) mean similarity part of the BCL terms,
/// `repulsion` the mean log-normalizer part.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_instance: Vec<f64>,
    pub attraction: f64,
    pub repulsion: f64,
}

/// A sample participating in a contrastive denominator: either a batch
/// instance or a class prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Member {
    Inst(usize),
    Proto(usize),
}

/// One class's slice of a contrastive denominator.
#[derive(Debug, Clone)]
pub(crate) struct Group {
    pub class: usize,
    pub weight: f64,
    pub members: Vec<Member>,
}

/// Per-anchor structure of a loss of the common shape
/// `-(1/m) sum_{p in positives} log( exp(s_ip/tau) / D_i )` where
/// `D_i = sum_groups weight * sum_members exp(s_ik/tau)`.
#[derive(Debug, Clone)]
pub(crate) struct AnchorSpec {
    pub anchor: usize,
    pub m: f64,
    pub positives: Vec<Member>,
    pub groups: Vec<Group>,
}

pub(crate) fn member_vec<'a>(
    z: &'a UnitConfiguration,
    protos: Option<&'a PrototypeSet>,
    m: Member,
) -> ArrayView1<'a, f64> {
    match m {
        Member::Inst(i) => z.z.row(i),
        Member::Proto(c) => protos.expect("prototype member without prototypes").c.row(c),
    }
}

/// SCL anchor structure; `None` when the anchor has no positive.
pub(crate) fn anchor_spec_scl(batch: &Batch, labels: &[usize], anchor: usize) -> Option<AnchorSpec> {
    let y = labels[anchor];
    let m = batch.class_size(y).saturating_sub(1);
    if m == 0 {
        return None;
    }
    let mut groups = Vec::with_capacity(batch.per_class.len());
    let mut positives = Vec::with_capacity(m);
    for (&class, idxs) in &batch.per_class {
        let members: Vec<Member> = idxs
            .iter()
            .filter(|&&i| i != anchor)
            .map(|&i| Member::Inst(i))
            .collect();
        if class == y {
            positives = members.clone();
        }
        if !members.is_empty() {
            groups.push(Group {
                class,
                weight: 1.0,
                members,
            });
        }
    }
    Some(AnchorSpec {
        anchor,
        m: m as f64,
        positives,
        groups,
    })
}

/// L1 anchor structure (class-averaging outside the exponential). The
/// positive class divisor is reduced by one and the anchor excluded.
pub(crate) fn anchor_spec_l1(batch: &Batch, labels: &[usize], anchor: usize) -> Option<AnchorSpec> {
    let y = labels[anchor];
    let m = batch.class_size(y).saturating_sub(1);
    if m == 0 {
        return None;
    }
    let mut groups = Vec::with_capacity(batch.per_class.len());
    let mut positives = Vec::with_capacity(m);
    for (&class, idxs) in &batch.per_class {
        if class == y {
            let members: Vec<Member> = idxs
                .iter()
                .filter(|&&i| i != anchor)
                .map(|&i| Member::Inst(i))
                .collect();
            positives = members.clone();
            groups.push(Group {
                class,
                weight: 1.0 / m as f64,
                members,
            });
        } else {
            groups.push(Group {
                class,
                weight: 1.0 / idxs.len() as f64,
                members: idxs.iter().map(|&i| Member::Inst(i)).collect(),
            });
        }
    }
    Some(AnchorSpec {
        anchor,
        m: m as f64,
        positives,
        groups,
    })
}

/// BCL anchor structure: positives are the batch positives plus the class
/// prototype, averaged by their count `|B_y|`. Every class's denominator
/// group is `B_j ∪ {c_j}` divided by `|B_j| + 1` — including the anchor
/// itself in its own class's group. Keeping the anchor's self-similarity in
/// the denominator is what makes the collapsed regular simplex the loss
/// minimizer regardless of class imbalance; dropping it lets head-class
/// anchors undercut the closed-form floor.
pub(crate) fn anchor_spec_bcl(
    batch: &Batch,
    labels: &[usize],
    k: usize,
    anchor: usize,
) -> AnchorSpec {
    let y = labels[anchor];
    let mut groups = Vec::with_capacity(k);
    let mut positives = Vec::new();
    for class in 0..k {
        let mut members: Vec<Member> = batch
            .per_class
            .get(&class)
            .map(|idxs| idxs.iter().map(|&i| Member::Inst(i)).collect())
            .unwrap_or_default();
        members.push(Member::Proto(class));
        if class == y {
            positives = members
                .iter()
                .copied()
                .filter(|&m| m != Member::Inst(anchor))
                .collect();
        }
        groups.push(Group {
            class,
            weight: 1.0 / members.len() as f64,
            members,
        });
    }
    AnchorSpec {
        anchor,
        m: positives.len() as f64,
        positives,
        groups,
    }
}

/// Evaluates the common-shape loss for one anchor, returning
/// `(loss, attraction, repulsion)` where `attraction = -(1/m) sum s/tau`
/// and `repulsion = log D`.
pub(crate) fn eval_anchor(
    z: &UnitConfiguration,
    protos: Option<&PrototypeSet>,
    spec: &AnchorSpec,
    tau: f64,
) -> (f64, f64, f64) {
    let zi = z.z.row(spec.anchor);
    // max-subtracted log-sum-exp over the weighted denominator
    let mut max_arg = f64::NEG_INFINITY;
    for g in &spec.groups {
        for &m in &g.members {
            let arg = zi.dot(&member_vec(z, protos, m)) / tau;
            if arg > max_arg {
                max_arg = arg;
            }
        }
    }
    let mut denom = 0.0;
    for g in &spec.groups {
        let mut group_sum = 0.0;
        for &m in &g.members {
            let arg = zi.dot(&member_vec(z, protos, m)) / tau;
            group_sum += (arg - max_arg).exp();
        }
        denom += g.weight * group_sum;
    }
    let log_d = max_arg + denom.ln();
    let mut sim_sum = 0.0;
    for &p in &spec.positives {
        sim_sum += zi.dot(&member_vec(z, protos, p)) / tau;
    }
    let attraction = -sim_sum / spec.m;
    (attraction + log_d, attraction, log_d)
}

/// Per-instance supervised contrastive loss: in-batch positives averaged
/// outside the log, every other instance in the denominator.
pub fn scl_instance_loss(
    z: &UnitConfiguration,
    batch: &Batch,
    anchor: usize,
    tau: f64,
) -> Result<f64> {
    let spec =
        anchor_spec_scl(batch, &z.labels, anchor).ok_or(Error::NoPositive { anchor })?;
    Ok(eval_anchor(z, None, &spec, tau).0)
}

/// Class-averaging outside the exponential.
pub fn averaged_loss_l1(
    z: &UnitConfiguration,
    batch: &Batch,
    anchor: usize,
    tau: f64,
) -> Result<f64> {
    let spec =
        anchor_spec_l1(batch, &z.labels, anchor).ok_or(Error::NoPositive { anchor })?;
    Ok(eval_anchor(z, None, &spec, tau).0)
}

/// Class-averaging inside the exponential: the denominator is
/// `sum_j exp((1/|B_j|') sum_k s_ik / tau)` with the positive class averaged
/// over `|B_y| - 1` non-anchor members.
pub fn averaged_loss_l2(
    z: &UnitConfiguration,
    batch: &Batch,
    anchor: usize,
    tau: f64,
) -> Result<f64> {
    let y = z.labels[anchor];
    let m = batch.class_size(y).saturating_sub(1);
    if m == 0 {
        return Err(Error::NoPositive { anchor });
    }
    let zi = z.z.row(anchor);
    let mut class_means = Vec::with_capacity(batch.per_class.len());
    let mut sim_sum = 0.0;
    for (&class, idxs) in &batch.per_class {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &i in idxs {
            if i == anchor {
                continue;
            }
            let s = zi.dot(&z.z.row(i)) / tau;
            sum += s;
            count += 1;
            if class == y {
                sim_sum += s;
            }
        }
        class_means.push(sum / count as f64);
    }
    let log_d = log_sum_exp(&class_means);
    Ok(-sim_sum / m as f64 + log_d)
}

/// Prototype-only contrastive loss: softmax cross-entropy over prototype
/// similarities at the anchor's class.
pub fn prototype_loss_l3(
    z_i: ArrayView1<f64>,
    label: usize,
    protos: &PrototypeSet,
    tau: f64,
) -> f64 {
    let args: Vec<f64> = protos
        .c
        .rows()
        .into_iter()
        .map(|c| z_i.dot(&c) / tau)
        .collect();
    log_sum_exp(&args) - args[label]
}

/// Per-instance balanced contrastive loss: class-complement prototypes plus
/// class-averaging. Always well-defined; the prototype supplies a positive
/// even when the anchor is its class's sole instance.
pub fn bcl_instance_loss(
    z: &UnitConfiguration,
    batch: &Batch,
    anchor: usize,
    protos: &PrototypeSet,
    tau: f64,
) -> f64 {
    let spec = anchor_spec_bcl(batch, &z.labels, z.k, anchor);
    eval_anchor(z, Some(protos), &spec, tau).0
}

/// BCL per-anchor value with its attraction/repulsion split.
pub fn bcl_instance_parts(
    z: &UnitConfiguration,
    batch: &Batch,
    anchor: usize,
    protos: &PrototypeSet,
    tau: f64,
) -> (f64, f64, f64) {
    let spec = anchor_spec_bcl(batch, &z.labels, z.k, anchor);
    eval_anchor(z, Some(protos), &spec, tau)
}

/// Which per-anchor kernel a class-specific batch-wise loss sums.
#[derive(Debug, Clone, Copy)]
pub enum BatchLossKind<'a> {
    Scl,
    L1,
    L2,
    L3(&'a PrototypeSet),
    Bcl(&'a PrototypeSet),
}

impl BatchLossKind<'_> {
    /// Smallest batch class that yields a valid anchor: two instances when
    /// positives come from the batch, one when a prototype supplies them.
    pub fn min_class_size(&self) -> usize {
        match self {
            BatchLossKind::L3(_) | BatchLossKind::Bcl(_) => 1,
            _ => 2,
        }
    }
}

/// Class-specific batch-wise loss: the sum of per-anchor losses over `B_y`,
/// defined as 0 when `|B_y| <= 1`.
pub fn class_batch_loss(
    z: &UnitConfiguration,
    batch: &Batch,
    y: usize,
    tau: f64,
    kind: BatchLossKind<'_>,
) -> f64 {
    let anchors = match batch.per_class.get(&y) {
        Some(a) if a.len() > 1 => a,
        _ => return 0.0,
    };
    anchors
        .iter()
        .map(|&i| match kind {
            BatchLossKind::Scl => scl_instance_loss(z, batch, i, tau).expect("|B_y| > 1"),
            BatchLossKind::L1 => averaged_loss_l1(z, batch, i, tau).expect("|B_y| > 1"),
            BatchLossKind::L2 => averaged_loss_l2(z, batch, i, tau).expect("|B_y| > 1"),
            BatchLossKind::L3(p) => prototype_loss_l3(z.z.row(i), z.labels[i], p, tau),
            BatchLossKind::Bcl(p) => bcl_instance_loss(z, batch, i, p, tau),
        })
        .sum()
}

/// Class-balanced batch loss: the mean over classes of each class's mean
/// per-anchor loss, so every class counts equally no matter how many anchors
/// it contributes. Classes too small to yield a valid anchor drop out of the
/// average; errors if none qualifies.
pub fn class_balanced_loss(
    z: &UnitConfiguration,
    batch: &Batch,
    tau: f64,
    kind: BatchLossKind<'_>,
) -> Result<f64> {
    let min_size = kind.min_class_size();
    let mut total = 0.0;
    let mut classes = 0usize;
    for (&y, idxs) in &batch.per_class {
        if idxs.len() < min_size {
            continue;
        }
        let class_sum: f64 = idxs
            .iter()
            .map(|&i| match kind {
                BatchLossKind::Scl => scl_instance_loss(z, batch, i, tau).expect("|B_y| > 1"),
                BatchLossKind::L1 => averaged_loss_l1(z, batch, i, tau).expect("|B_y| > 1"),
                BatchLossKind::L2 => averaged_loss_l2(z, batch, i, tau).expect("|B_y| > 1"),
                BatchLossKind::L3(p) => prototype_loss_l3(z.z.row(i), y, p, tau),
                BatchLossKind::Bcl(p) => bcl_instance_loss(z, batch, i, p, tau),
            })
            .sum();
        total += class_sum / idxs.len() as f64;
        classes += 1;
    }
    if classes == 0 {
        return Err(Error::Undefined(
            "no class in the batch has a valid anchor".into(),
        ));
    }
    Ok(total / classes as f64)
}

/// Logit-compensated cross-entropy: softmax cross-entropy of
/// `logits + log(priors)` at `label`, scaled by `alpha`.
pub fn lc_cross_entropy(logits: &[f64], label: usize, priors: &[f64], alpha: f64) -> f64 {
    let args: Vec<f64> = logits
        .iter()
        .zip(priors.iter())
        .map(|(&l, &p)| l + p.ln())
        .collect();
    alpha * (log_sum_exp(&args) - args[label])
}

/// Combined objective `lambda * mean(L_LC) + mu * mean(L_BCL)` over a batch.
/// Logits are the plain linear map `W z_i`. `per_instance` holds each
/// anchor's contribution to `total` (already divided by the batch size).
pub fn combined_loss(
    z: &UnitConfiguration,
    batch: &Batch,
    protos: &PrototypeSet,
    classifier: &ClassifierWeights,
    params: &LossParams,
) -> Result<LossBreakdown> {
    params.validate()?;
    let n = batch.len() as f64;
    let mut per_instance = Vec::with_capacity(batch.len());
    let mut attraction = 0.0;
    let mut repulsion = 0.0;
    // ascending anchor index keeps the reduction order fixed
    for &i in &batch.indices {
        let logits: Vec<f64> = classifier.w.dot(&z.z.row(i)).to_vec();
        let lc = lc_cross_entropy(&logits, z.labels[i], &classifier.priors, 1.0);
        let (bcl, att, rep) = bcl_instance_parts(z, batch, i, protos, params.tau);
        attraction += params.mu * att / n;
        repulsion += params.mu * rep / n;
        per_instance.push((params.lambda * lc + params.mu * bcl) / n);
    }
    let total = per_instance.iter().sum();
    Ok(LossBreakdown {
        total,
        per_instance,
        attraction,
        repulsion,
    })
}

pub(crate) fn log_sum_exp(args: &[f64]) -> f64 {
    let max = args.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + args.iter().map(|&a| (a - max).exp()).sum::<f64>().ln()
}
