//! Hand-derived analytic gradients of the contrastive losses, the
//! finite-difference oracle used to validate them, and the per-class
//! negative-gradient attribution behind the imbalance analysis.
//!
//! All gradient functions differentiate the *total* batch loss (the sum of
//! per-anchor terms over every valid anchor), so they agree with central
//! finite differences of that total. Cross-anchor contributions — an
//! embedding appearing in other anchors' denominators — are accumulated on
//! top of the per-anchor forms.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::embedding::{
    l2_norm, sphere_project_gradient, PrototypeSet, RawConfiguration, UnitConfiguration,
};
use crate::error::{Error, Result};
use crate::longtail::Batch;
use crate::loss::{
    anchor_spec_bcl, anchor_spec_l1, anchor_spec_scl, lc_cross_entropy, member_vec, AnchorSpec,
    ClassifierWeights, LossParams, Member,
};

/// Gradients of a batch loss with respect to raw parameters (`dw`), the
/// pre-projection normalized embeddings (`dz`), and raw prototype parameters
/// (`dproto`, when prototypes participate). `per_class_negative_norm` sums,
/// over anchors outside each class, the norm of that class's projected
/// negative-gradient contribution.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub dw: Array2<f64>,
    pub dz: Array2<f64>,
    pub dproto: Option<Array2<f64>>,
    pub per_class_negative_norm: BTreeMap<usize, f64>,
}

/// Scratch accumulator shared by the common-shape losses.
struct Accumulator {
    dz: Array2<f64>,
    dproto_z: Option<Array2<f64>>,
    neg_norms: BTreeMap<usize, f64>,
}

impl Accumulator {
    fn new(n: usize, h: usize, k_proto: Option<usize>) -> Self {
        Accumulator {
            dz: Array2::zeros((n, h)),
            dproto_z: k_proto.map(|k| Array2::zeros((k, h))),
            neg_norms: BTreeMap::new(),
        }
    }

    fn add(&mut self, m: Member, scale: f64, v: &Array1<f64>) {
        match m {
            Member::Inst(i) => {
                let mut row = self.dz.row_mut(i);
                row.zip_mut_with(v, |r, &x| *r += scale * x);
            }
            Member::Proto(c) => {
                let mut row = self
                    .dproto_z
                    .as_mut()
                    .expect("prototype gradient without prototype buffer")
                    .row_mut(c);
                row.zip_mut_with(v, |r, &x| *r += scale * x);
            }
        }
    }
}

/// Accumulates `wgt` times the gradient of one common-shape anchor term
/// `-(1/m) sum_p (s_ip/tau) + log D_i` into the accumulator.
fn accumulate_anchor(
    z: &UnitConfiguration,
    protos: Option<&PrototypeSet>,
    spec: &AnchorSpec,
    tau: f64,
    wgt: f64,
    acc: &mut Accumulator,
) {
    let zi = z.z.row(spec.anchor).to_owned();
    let y = z.labels[spec.anchor];

    // softmax responsibilities Q over the weighted denominator
    let mut args: Vec<Vec<f64>> = Vec::with_capacity(spec.groups.len());
    let mut max_arg = f64::NEG_INFINITY;
    for g in &spec.groups {
        let group_args: Vec<f64> = g
            .members
            .iter()
            .map(|&m| zi.dot(&member_vec(z, protos, m)) / tau)
            .collect();
        for &a in &group_args {
            if a > max_arg {
                max_arg = a;
            }
        }
        args.push(group_args);
    }
    let mut denom = 0.0;
    for (g, group_args) in spec.groups.iter().zip(&args) {
        denom += g.weight * group_args.iter().map(|&a| (a - max_arg).exp()).sum::<f64>();
    }

    let inv_m = 1.0 / spec.m;
    let mut dz_anchor = Array1::<f64>::zeros(zi.len());
    for (g, group_args) in spec.groups.iter().zip(&args) {
        // projected per-class repulsion vector for the attribution map
        let mut neg_vec = (g.class != y).then(|| Array1::<f64>::zeros(zi.len()));
        for (&m, &arg) in g.members.iter().zip(group_args) {
            let q = g.weight * (arg - max_arg).exp() / denom;
            let zk = member_vec(z, protos, m);
            // anchor term: (1/tau) * q * z_k
            dz_anchor.zip_mut_with(&zk, |d, &x| *d += q * x / tau);
            // other-entity term: (1/tau) (q - [member in positives]/m) z_i
            let positive = spec.positives.contains(&m);
            let coeff = (q - if positive { inv_m } else { 0.0 }) / tau;
            acc.add(m, wgt * coeff, &zi);
            if let Some(v) = neg_vec.as_mut() {
                let radial = zi.dot(&zk);
                v.zip_mut_with(&zk, |vv, &x| *vv += q * x);
                v.zip_mut_with(&zi, |vv, &x| *vv -= q * radial * x);
            }
        }
        if let Some(v) = neg_vec {
            *acc.neg_norms.entry(g.class).or_insert(0.0) += wgt * l2_norm(v.view()) / tau;
        }
    }
    // remaining anchor term: -(1/(m tau)) sum_p z_p
    for &p in &spec.positives {
        let zp = member_vec(z, protos, p);
        dz_anchor.zip_mut_with(&zp, |d, &x| *d -= inv_m * x / tau);
    }
    acc.add(Member::Inst(spec.anchor), wgt, &dz_anchor);
}

fn project_all(raw: &Array2<f64>, unit: &Array2<f64>, dz: &Array2<f64>) -> Result<Array2<f64>> {
    let mut dw = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let g = sphere_project_gradient(raw.row(i), unit.row(i), dz.row(i))?;
        dw.row_mut(i).assign(&g);
    }
    Ok(dw)
}

fn finish(
    raw: &RawConfiguration,
    z: &UnitConfiguration,
    proto_raw: Option<&Array2<f64>>,
    protos: Option<&PrototypeSet>,
    acc: Accumulator,
) -> Result<GradientField> {
    let dw = project_all(&raw.w, &z.z, &acc.dz)?;
    let dproto = match (proto_raw, protos, &acc.dproto_z) {
        (Some(pr), Some(ps), Some(dpz)) => Some(project_all(pr, &ps.c, dpz)?),
        _ => None,
    };
    Ok(GradientField {
        dw,
        dz: acc.dz,
        dproto,
        per_class_negative_norm: acc.neg_norms,
    })
}

/// Gradient of the total SCL batch loss (sum of per-anchor losses).
/// Errors with [`Error::NoPositive`] if any anchor in the batch lacks one.
pub fn scl_gradient(raw: &RawConfiguration, batch: &Batch, tau: f64) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), None);
    for &i in &batch.indices {
        let spec = anchor_spec_scl(batch, &z.labels, i).ok_or(Error::NoPositive { anchor: i })?;
        accumulate_anchor(&z, None, &spec, tau, 1.0, &mut acc);
    }
    finish(raw, &z, None, None, acc)
}

/// Like [`scl_gradient`] but anchors without positives contribute zero, the
/// class-specific batch-wise convention used during training.
pub fn scl_gradient_lenient(
    raw: &RawConfiguration,
    batch: &Batch,
    tau: f64,
) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), None);
    for &i in &batch.indices {
        if let Some(spec) = anchor_spec_scl(batch, &z.labels, i) {
            accumulate_anchor(&z, None, &spec, tau, 1.0, &mut acc);
        }
    }
    finish(raw, &z, None, None, acc)
}

/// Gradient of the total L1 (class-averaged) batch loss; anchors without
/// positives contribute zero.
pub fn l1_gradient(raw: &RawConfiguration, batch: &Batch, tau: f64) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), None);
    for &i in &batch.indices {
        if let Some(spec) = anchor_spec_l1(batch, &z.labels, i) {
            accumulate_anchor(&z, None, &spec, tau, 1.0, &mut acc);
        }
    }
    finish(raw, &z, None, None, acc)
}

/// Accumulates `wgt` times the gradient of one L2 anchor term (class
/// averaging inside the exponential). No-op for anchors without a positive.
fn accumulate_l2_anchor(
    z: &UnitConfiguration,
    batch: &Batch,
    anchor: usize,
    tau: f64,
    wgt: f64,
    acc: &mut Accumulator,
) {
    let y = z.labels[anchor];
    let m = batch.class_size(y).saturating_sub(1);
    if m == 0 {
        return;
    }
    let h = z.z.ncols();
    let zi = z.z.row(anchor).to_owned();
    // per-class mean arguments u_j and softmax responsibilities R_j
    let mut classes = Vec::new();
    for (&class, idxs) in &batch.per_class {
        let members: Vec<usize> = idxs.iter().copied().filter(|&i| i != anchor).collect();
        if members.is_empty() {
            continue;
        }
        let u = members
            .iter()
            .map(|&i| zi.dot(&z.z.row(i)) / tau)
            .sum::<f64>()
            / members.len() as f64;
        classes.push((class, members, u));
    }
    let max_u = classes
        .iter()
        .map(|(_, _, u)| *u)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = classes.iter().map(|(_, _, u)| (u - max_u).exp()).sum();

    let inv_m = 1.0 / m as f64;
    let mut dz_anchor = Array1::<f64>::zeros(h);
    for (class, members, u) in &classes {
        let r = (u - max_u).exp() / denom;
        let mean_weight = r / (members.len() as f64 * tau);
        for &t in members {
            let zt = z.z.row(t);
            dz_anchor.zip_mut_with(&zt, |d, &x| *d += mean_weight * x);
            let positive = *class == y;
            let coeff = mean_weight - if positive { inv_m / tau } else { 0.0 };
            acc.add(Member::Inst(t), wgt * coeff, &zi);
        }
    }
    // anchor's attraction part
    for &p in &batch.per_class[&y] {
        if p == anchor {
            continue;
        }
        let zp = z.z.row(p);
        dz_anchor.zip_mut_with(&zp, |d, &x| *d -= inv_m * x / tau);
    }
    acc.add(Member::Inst(anchor), wgt, &dz_anchor);
}

/// Gradient of the total L2 batch loss (class-averaging inside the
/// exponential); anchors without positives contribute zero.
pub fn l2_gradient(raw: &RawConfiguration, batch: &Batch, tau: f64) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), None);
    for &anchor in &batch.indices {
        accumulate_l2_anchor(&z, batch, anchor, tau, 1.0, &mut acc);
    }
    finish(raw, &z, None, None, acc)
}

/// Gradient of the total BCL batch loss, including raw prototype gradients.
/// Always well-defined: the class prototype supplies every anchor's positive.
pub fn bcl_gradient(
    raw: &RawConfiguration,
    batch: &Batch,
    proto_raw: &Array2<f64>,
    tau: f64,
) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let protos = PrototypeSet::from_raw(proto_raw)?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), Some(raw.k));
    for &i in &batch.indices {
        let spec = anchor_spec_bcl(batch, &z.labels, raw.k, i);
        accumulate_anchor(&z, Some(&protos), &spec, tau, 1.0, &mut acc);
    }
    finish(raw, &z, Some(proto_raw), Some(&protos), acc)
}

/// Accumulates `wgt` times the gradient of one L3 (prototype-only) anchor
/// term.
fn accumulate_l3_anchor(
    z: &UnitConfiguration,
    protos: &PrototypeSet,
    anchor: usize,
    tau: f64,
    wgt: f64,
    acc: &mut Accumulator,
) {
    let k = protos.c.nrows();
    let y = z.labels[anchor];
    let zi = z.z.row(anchor).to_owned();
    let args: Vec<f64> = (0..k).map(|c| zi.dot(&protos.c.row(c)) / tau).collect();
    let max_arg = args.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = args.iter().map(|&a| (a - max_arg).exp()).sum();
    let mut dz_anchor = Array1::<f64>::zeros(zi.len());
    for c in 0..k {
        let sigma = (args[c] - max_arg).exp() / denom;
        let delta = sigma - if c == y { 1.0 } else { 0.0 };
        dz_anchor.zip_mut_with(&protos.c.row(c), |d, &x| *d += delta * x / tau);
        acc.add(Member::Proto(c), wgt * delta / tau, &zi);
    }
    acc.add(Member::Inst(anchor), wgt, &dz_anchor);
}

/// Gradient of the total L3 (prototype-only) batch loss.
pub fn l3_gradient(
    raw: &RawConfiguration,
    batch: &Batch,
    proto_raw: &Array2<f64>,
    tau: f64,
) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let protos = PrototypeSet::from_raw(proto_raw)?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), Some(raw.k));
    for &anchor in &batch.indices {
        accumulate_l3_anchor(&z, &protos, anchor, tau, 1.0, &mut acc);
    }
    finish(raw, &z, Some(proto_raw), Some(&protos), acc)
}

/// Objective selector for [`class_balanced_gradient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalancedObjective {
    Scl,
    L1,
    L2,
    L3,
    Bcl,
}

impl BalancedObjective {
    fn needs_prototypes(self) -> bool {
        matches!(self, BalancedObjective::L3 | BalancedObjective::Bcl)
    }

    /// Smallest batch class that yields a valid anchor: two instances when
    /// positives come from the batch, one when a prototype supplies them.
    fn min_class_size(self) -> usize {
        if self.needs_prototypes() {
            1
        } else {
            2
        }
    }
}

/// Gradient of the class-balanced batch objective
/// `(1/|Y*|) sum_{y in Y*} (1/|B_y|) sum_{i in B_y} L_i`, where `Y*` is the
/// set of classes large enough to yield a valid anchor. Every class pulls
/// with the same total weight no matter how many anchors it contributes, so
/// a long-tailed batch composition cannot tilt the optimum by anchor count
/// alone. A batch with no valid class yields a zero gradient.
pub fn class_balanced_gradient(
    raw: &RawConfiguration,
    batch: &Batch,
    proto_raw: Option<&Array2<f64>>,
    objective: BalancedObjective,
    tau: f64,
) -> Result<GradientField> {
    let z = crate::embedding::normalize(raw)?;
    let protos = match (objective.needs_prototypes(), proto_raw) {
        (true, Some(p)) => Some(PrototypeSet::from_raw(p)?),
        (true, None) => {
            return Err(Error::Config(
                "prototype-based objective requires prototypes".into(),
            ))
        }
        (false, _) => None,
    };
    let min_size = objective.min_class_size();
    let valid: Vec<(usize, &Vec<usize>)> = batch
        .per_class
        .iter()
        .filter(|(_, idxs)| idxs.len() >= min_size)
        .map(|(&c, idxs)| (c, idxs))
        .collect();
    let mut acc = Accumulator::new(raw.n(), raw.h(), protos.as_ref().map(|_| raw.k));
    let class_scale = 1.0 / valid.len().max(1) as f64;
    for (_, idxs) in &valid {
        let wgt = class_scale / idxs.len() as f64;
        for &i in *idxs {
            match objective {
                BalancedObjective::Scl => {
                    let spec = anchor_spec_scl(batch, &z.labels, i).expect("|B_y| > 1");
                    accumulate_anchor(&z, None, &spec, tau, wgt, &mut acc);
                }
                BalancedObjective::L1 => {
                    let spec = anchor_spec_l1(batch, &z.labels, i).expect("|B_y| > 1");
                    accumulate_anchor(&z, None, &spec, tau, wgt, &mut acc);
                }
                BalancedObjective::L2 => accumulate_l2_anchor(&z, batch, i, tau, wgt, &mut acc),
                BalancedObjective::L3 => {
                    accumulate_l3_anchor(&z, protos.as_ref().unwrap(), i, tau, wgt, &mut acc)
                }
                BalancedObjective::Bcl => {
                    let spec = anchor_spec_bcl(batch, &z.labels, raw.k, i);
                    accumulate_anchor(&z, protos.as_ref(), &spec, tau, wgt, &mut acc);
                }
            }
        }
    }
    finish(
        raw,
        &z,
        protos.as_ref().and(proto_raw),
        protos.as_ref(),
        acc,
    )
}

/// Gradients of the combined objective
/// `lambda * mean(L_LC) + mu * mean(L_BCL)` over a batch, including the
/// classifier-weight gradient. Returns `(loss, field, d_classifier)`.
pub fn combined_gradient(
    raw: &RawConfiguration,
    batch: &Batch,
    proto_raw: &Array2<f64>,
    classifier: &ClassifierWeights,
    params: &LossParams,
) -> Result<(f64, GradientField, Array2<f64>)> {
    params.validate()?;
    let z = crate::embedding::normalize(raw)?;
    let protos = PrototypeSet::from_raw(proto_raw)?;
    let n = batch.len() as f64;
    let k = raw.k;
    let h = raw.h();

    let mut bcl_acc = Accumulator::new(raw.n(), h, Some(k));
    let mut dz_lc = Array2::<f64>::zeros((raw.n(), h));
    let mut d_classifier = Array2::<f64>::zeros((k, h));
    let mut loss = 0.0;

    for &i in &batch.indices {
        let y = z.labels[i];
        let zi = z.z.row(i);
        // logit-compensated cross-entropy branch
        let logits: Vec<f64> = classifier.w.dot(&zi).to_vec();
        loss += params.lambda * lc_cross_entropy(&logits, y, &classifier.priors, 1.0) / n;
        let args: Vec<f64> = logits
            .iter()
            .zip(&classifier.priors)
            .map(|(&l, &p)| l + p.ln())
            .collect();
        let max_arg = args.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = args.iter().map(|&a| (a - max_arg).exp()).sum();
        for c in 0..k {
            let sigma = (args[c] - max_arg).exp() / denom;
            let delta = params.lambda * (sigma - if c == y { 1.0 } else { 0.0 }) / n;
            let mut row = dz_lc.row_mut(i);
            row.zip_mut_with(&classifier.w.row(c), |r, &x| *r += delta * x);
            let mut wrow = d_classifier.row_mut(c);
            wrow.zip_mut_with(&zi, |r, &x| *r += delta * x);
        }
        // balanced contrastive branch
        let spec = anchor_spec_bcl(batch, &z.labels, k, i);
        loss += params.mu * crate::loss::eval_anchor(&z, Some(&protos), &spec, params.tau).0 / n;
        accumulate_anchor(&z, Some(&protos), &spec, params.tau, 1.0, &mut bcl_acc);
    }

    // scale the BCL sum to mu * mean, then fold in the LC embedding gradient
    let scale = params.mu / n;
    let mut dz = bcl_acc.dz.mapv(|x| x * scale);
    dz += &dz_lc;
    let dproto_z = bcl_acc.dproto_z.take().unwrap().mapv(|x| x * scale);
    let dw = project_all(&raw.w, &z.z, &dz)?;
    let dproto = project_all(proto_raw, &protos.c, &dproto_z)?;
    let field = GradientField {
        dw,
        dz,
        dproto: Some(dproto),
        per_class_negative_norm: bcl_acc.neg_norms,
    };
    Ok((loss, field, d_classifier))
}

/// Per-negative-class norms of one anchor's repulsion gradient under SCL:
/// the tangent-projected pull on the anchor attributed to each class other
/// than its own. Errors if the anchor has no positive.
pub fn scl_anchor_negative_norms(
    raw: &RawConfiguration,
    batch: &Batch,
    anchor: usize,
    tau: f64,
) -> Result<BTreeMap<usize, f64>> {
    let z = crate::embedding::normalize(raw)?;
    let spec = anchor_spec_scl(batch, &z.labels, anchor).ok_or(Error::NoPositive { anchor })?;
    let mut acc = Accumulator::new(raw.n(), raw.h(), None);
    accumulate_anchor(&z, None, &spec, tau, 1.0, &mut acc);
    Ok(acc.neg_norms)
}

/// The balanced-loss counterpart of [`scl_anchor_negative_norms`]; always
/// well-defined.
pub fn bcl_anchor_negative_norms(
    raw: &RawConfiguration,
    batch: &Batch,
    proto_raw: &Array2<f64>,
    anchor: usize,
    tau: f64,
) -> Result<BTreeMap<usize, f64>> {
    let z = crate::embedding::normalize(raw)?;
    let protos = PrototypeSet::from_raw(proto_raw)?;
    let spec = anchor_spec_bcl(batch, &z.labels, raw.k, anchor);
    let mut acc = Accumulator::new(raw.n(), raw.h(), Some(raw.k));
    accumulate_anchor(&z, Some(&protos), &spec, tau, 1.0, &mut acc);
    Ok(acc.neg_norms)
}

/// Central-difference gradient `(f(x + e_i step) - f(x - e_i step)) / (2 step)`
/// of a scalar function over a flat parameter vector.
pub fn finite_difference<F>(loss_fn: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(params.len());
    let mut point = params.to_vec();
    for i in 0..params.len() {
        point[i] = params[i] + step;
        let plus = loss_fn(&point);
        point[i] = params[i] - step;
        let minus = loss_fn(&point);
        point[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(i));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error between an analytic and a finite-difference gradient with a
/// floor denominator `max(|a|, |b|, 1e-8)` per coordinate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
