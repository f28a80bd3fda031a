//! Training objectives and their gradients.
//!
//! Every `*_grad` function returns the loss together with its gradient with
//! respect to the quantity the network produces (logits, joint coordinates,
//! or latent rows).

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::hand_model::{
    bones_unchecked, bone_grads_to_joints, cmc_angles, cmc_angles_backward, cmc_curvatures,
    cmc_curvatures_backward, range_penalty_slope, range_penalty_unchecked, HandModel, HandPose,
    NUM_BONES, NUM_CMC_BONES, NUM_CMC_GAPS, NUM_FINGER_BONES, NUM_JOINTS,
};
use crate::kv::KvConfig;
use crate::mask::HandMask;
use crate::network::{Forward, OutputGrads};
use crate::nn::{sigmoid, Tensor};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_pose: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub gamma_focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma_pose: 0.01,
            lambda: 1e-4,
            zeta: 0.1,
            gamma_focal: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma_pose, self.lambda, self.zeta, self.gamma_focal];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("alpha", self.alpha);
        kv.set("beta", self.beta);
        kv.set("gamma_pose", self.gamma_pose);
        kv.set("lambda", self.lambda);
        kv.set("zeta", self.zeta);
        kv.set("gamma_focal", self.gamma_focal);
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut w = Self::default();
        for (key, slot) in [
            ("alpha", &mut w.alpha),
            ("beta", &mut w.beta),
            ("gamma_pose", &mut w.gamma_pose),
            ("lambda", &mut w.lambda),
            ("zeta", &mut w.zeta),
            ("gamma_focal", &mut w.gamma_focal),
        ] {
            if let Some(v) = kv.parse_opt(key)? {
                *slot = v;
            }
        }
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLossKind {
    Bce,
    Focal,
    /// Squared error between probability and label.
    Mse,
}

impl std::str::FromStr for MaskLossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "focal" => Ok(Self::Focal),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown mask loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bce => "bce",
            Self::Focal => "focal",
            Self::Mse => "mse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointLossKind {
    /// Mean over joints of the squared Euclidean distance.
    Mse,
    /// Mean over joints of the L1 distance.
    Mae,
}

impl std::str::FromStr for JointLossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            other => Err(Error::Config(format!("unknown joint loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for JointLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Mae => "mae",
        })
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::of(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

fn check_mask_len<T>(probs: &[T], mask: &HandMask) -> Result<()> {
    if probs.len() != mask.len() {
        return Err(Error::Shape(format!(
            "probability map has {} cells, mask has {}",
            probs.len(),
            mask.len()
        )));
    }
    Ok(())
}

pub fn bce_loss<T: Scalar>(probs: &[T], mask: &HandMask) -> Result<T> {
    check_mask_len(probs, mask)?;
    let sum: T = probs
        .iter()
        .zip(mask.as_slice())
        .map(|(&p, &m)| {
            let p = clamp_prob(p);
            if m == 1 {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
        })
        .sum();
    Ok(sum / T::of(probs.len() as f64))
}

pub fn focal_mask_loss<T: Scalar>(probs: &[T], mask: &HandMask, gamma: T) -> Result<T> {
    check_mask_len(probs, mask)?;
    if !(gamma >= T::zero()) {
        return Err(Error::Argument(format!("focusing parameter {gamma} must be >= 0")));
    }
    let sum: T = probs
        .iter()
        .zip(mask.as_slice())
        .map(|(&p, &m)| {
            let p = clamp_prob(p);
            let mt = if m == 1 { p } else { T::one() - p };
            -(T::one() - mt).powf(gamma) * mt.ln()
        })
        .sum();
    Ok(sum / T::of(probs.len() as f64))
}

/// Mask loss on logits; the gradient is with respect to the logits.
pub fn mask_loss_grad<T: Scalar>(logits: &[T], mask: &HandMask, kind: MaskLossKind, gamma: T) -> Result<(T, Vec<T>)> {
    check_mask_len(logits, mask)?;
    if !(gamma >= T::zero()) {
        return Err(Error::Argument(format!("focusing parameter {gamma} must be >= 0")));
    }
    let n = T::of(logits.len() as f64);
    let eps = T::of(PROB_EPS);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &m) in logits.iter().zip(mask.as_slice()) {
        let p = sigmoid(z);
        let dp = p * (T::one() - p);
        let target = if m == 1 { T::one() } else { T::zero() };
        match kind {
            MaskLossKind::Mse => {
                let d = p - target;
                loss += d * d;
                grad.push(T::of(2.0) * d * dp / n);
            }
            MaskLossKind::Bce | MaskLossKind::Focal => {
                let inside = p > eps && p < T::one() - eps;
                let pc = clamp_prob(p);
                let mt = if m == 1 { pc } else { T::one() - pc };
                let sign = if m == 1 { T::one() } else { -T::one() };
                // d m_t / d z; zero where the clamp is active.
                let dmt = if inside { sign * dp } else { T::zero() };
                if kind == MaskLossKind::Bce || gamma == T::zero() {
                    loss -= mt.ln();
                    grad.push(-dmt / mt / n);
                } else {
                    let q = T::one() - mt;
                    let w = q.powf(gamma);
                    loss -= w * mt.ln();
                    let dl_dmt = gamma * q.powf(gamma - T::one()) * mt.ln() - w / mt;
                    grad.push(dl_dmt * dmt / n);
                }
            }
        }
    }
    Ok((loss / n, grad))
}

fn check_pose_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != NUM_JOINTS * 3 || b.len() != NUM_JOINTS * 3 {
        return Err(Error::Shape(format!(
            "poses need {} values, got {} and {}",
            NUM_JOINTS * 3,
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn joint_loss<T: Scalar>(pred: &HandPose<T>, truth: &HandPose<T>) -> T {
    joint_loss_grad(&pred.to_flat(), &truth.to_flat(), JointLossKind::Mse)
        .expect("poses have 21 joints")
        .0
}

/// Joint loss over flat 63-vectors; gradient with respect to `pred`.
pub fn joint_loss_grad<T: Scalar>(pred: &[T], truth: &[T], kind: JointLossKind) -> Result<(T, Vec<T>)> {
    check_pose_len(pred, truth)?;
    let inv = T::one() / T::of(NUM_JOINTS as f64);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = p - t;
            match kind {
                JointLossKind::Mse => {
                    loss += d * d;
                    T::of(2.0) * d * inv
                }
                JointLossKind::Mae => {
                    loss += d.abs();
                    if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    }
                }
            }
        })
        .collect();
    Ok((loss * inv, grad))
}

pub fn bone_length_loss<T: Scalar>(pose: &HandPose<T>, model: &HandModel) -> T {
    bone_length_loss_grad(pose, model).0
}

/// Mean range penalty over the 15 finger-bone lengths; gradient per joint.
pub fn bone_length_loss_grad<T: Scalar>(pose: &HandPose<T>, model: &HandModel) -> (T, [Vec3<T>; NUM_JOINTS]) {
    let bones = bones_unchecked(pose, &model.topology);
    let inv = T::one() / T::of(NUM_FINGER_BONES as f64);
    let mut loss = T::zero();
    let mut gb = [[T::zero(); 3]; NUM_BONES];
    for (k, b) in bones.finger().iter().enumerate() {
        let (lo, hi) = model.bone_lengths.ranges[k];
        let (lo, hi) = (T::of(lo), T::of(hi));
        let len = geom::norm(*b);
        loss += range_penalty_unchecked(len, lo, hi);
        let s = range_penalty_slope(len, lo, hi);
        if s != T::zero() && len > T::zero() {
            gb[NUM_CMC_BONES + k] = geom::scale(*b, s * inv / len);
        }
    }
    (loss * inv, bone_grads_to_joints(&gb, &model.topology))
}

pub fn palmar_loss<T: Scalar>(pose: &HandPose<T>, model: &HandModel) -> Result<T> {
    Ok(palmar_loss_grad(pose, model)?.0)
}

/// `(1/4) sum_i R(c_i) + R(phi_i)` over the CMC gaps; gradient per joint.
pub fn palmar_loss_grad<T: Scalar>(pose: &HandPose<T>, model: &HandModel) -> Result<(T, [Vec3<T>; NUM_JOINTS])> {
    let bones = bones_unchecked(pose, &model.topology);
    let angles = cmc_angles(&bones)?;
    let curv = cmc_curvatures(&bones)?;
    let quarter = T::one() / T::of(NUM_CMC_GAPS as f64);
    let mut loss = T::zero();
    let mut up_a = [T::zero(); NUM_CMC_GAPS];
    let mut up_c = [T::zero(); NUM_CMC_GAPS];
    for i in 0..NUM_CMC_GAPS {
        let (alo, ahi) = model.palmar.angle[i];
        let (clo, chi) = model.palmar.curvature[i];
        let (alo, ahi, clo, chi) = (T::of(alo), T::of(ahi), T::of(clo), T::of(chi));
        loss += range_penalty_unchecked(curv[i], clo, chi) + range_penalty_unchecked(angles[i], alo, ahi);
        up_a[i] = range_penalty_slope(angles[i], alo, ahi) * quarter;
        up_c[i] = range_penalty_slope(curv[i], clo, chi) * quarter;
    }
    let mut gb = [[T::zero(); 3]; NUM_BONES];
    if up_a.iter().any(|v| *v != T::zero()) {
        for (k, g) in cmc_angles_backward(&bones, &up_a)?.into_iter().enumerate() {
            geom::add_assign(&mut gb[k], g);
        }
    }
    if up_c.iter().any(|v| *v != T::zero()) {
        for (k, g) in cmc_curvatures_backward(&bones, &up_c)?.into_iter().enumerate() {
            geom::add_assign(&mut gb[k], g);
        }
    }
    Ok((loss * quarter, bone_grads_to_joints(&gb, &model.topology)))
}

/// Covariance of the rows of a `bs x d` batch via the mean-outer-product
/// correction: `(S^T S - (1^T S)^T (1^T S) / bs) / (bs - 1)`.
pub fn covariance<T: Scalar>(s: &[T], bs: usize, d: usize) -> Result<Vec<T>> {
    if bs < 2 {
        return Err(Error::Argument(format!("covariance needs at least 2 rows, got {bs}")));
    }
    if s.len() != bs * d {
        return Err(Error::Shape(format!("batch of {bs} x {d} needs {} values, got {}", bs * d, s.len())));
    }
    let mut col = vec![T::zero(); d];
    for row in s.chunks_exact(d) {
        for (c, &v) in col.iter_mut().zip(row) {
            *c += v;
        }
    }
    let mut cov = vec![T::zero(); d * d];
    crate::scalar::matmul(d, bs, d, s, true, s, false, T::zero(), &mut cov);
    let inv_bs = T::one() / T::of(bs as f64);
    let inv = T::one() / T::of((bs - 1) as f64);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (cov[i * d + j] - col[i] * col[j] * inv_bs) * inv;
        }
    }
    Ok(cov)
}

fn latent_dims<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (d1, d2) = (s1.item_len(), s2.item_len());
    if d1 != d2 {
        return Err(Error::Shape(format!("latent widths differ: {d1} vs {d2}")));
    }
    if s1.n < 2 || s2.n < 2 {
        return Err(Error::Argument(format!(
            "CORAL needs batches of at least 2, got {} and {}",
            s1.n, s2.n
        )));
    }
    Ok((s1.n, s2.n, d1))
}

pub fn coral_loss<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<T> {
    Ok(coral_loss_grad(s1, s2)?.0)
}

/// `|C1 - C2|_F^2 / (4 d^2)` and its gradients with respect to both batches.
pub fn coral_loss_grad<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (b1, b2, d) = latent_dims(s1, s2)?;
    let c1 = covariance(&s1.data, b1, d)?;
    let c2 = covariance(&s2.data, b2, d)?;
    let scale = T::one() / (T::of(4.0) * T::of((d * d) as f64));
    let diff: Vec<T> = c1.iter().zip(&c2).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|&v| v * v).sum::<T>() * scale;
    // dL/dC1 = 2 * diff * scale; dC/dS = 2 (S - mean) G / (bs - 1) for symmetric G.
    let g: Vec<T> = diff.iter().map(|&v| T::of(2.0) * v * scale).collect();
    let grad_for = |s: &Tensor<T>, bs: usize, sign: T| -> Tensor<T> {
        let mut mean = vec![T::zero(); d];
        for row in s.data.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= T::of(bs as f64));
        let centered: Vec<T> = s
            .data
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v - m).collect::<Vec<_>>())
            .collect();
        let mut out = vec![T::zero(); bs * d];
        crate::scalar::matmul(bs, d, d, &centered, false, &g, false, T::zero(), &mut out);
        let f = sign * T::of(2.0) / T::of((bs - 1) as f64);
        out.iter_mut().for_each(|v| *v *= f);
        Tensor { data: out, ..*s }
    };
    Ok((loss, grad_for(s1, b1, T::one()), grad_for(s2, b2, -T::one())))
}

/// Per-batch means of each term, before weighting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub mask: T,
    pub joint: T,
    pub bone_length: T,
    pub palmar: T,
    pub coral: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn total(&self, w: &LossWeights) -> T {
        T::of(w.alpha) * self.mask
            + T::of(w.beta) * self.joint
            + T::of(w.gamma_pose) * self.bone_length
            + T::of(w.lambda) * self.palmar
            + T::of(w.zeta) * self.coral
    }

    pub fn is_finite(&self) -> bool {
        [self.mask, self.joint, self.bone_length, self.palmar, self.coral]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss<T: Scalar>(terms: &LossTerms<T>, w: &LossWeights) -> T {
    terms.total(w)
}

/// Everything that defines the per-batch task objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub mask_kind: MaskLossKind,
    pub joint_kind: JointLossKind,
    pub model: HandModel,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mask_kind: MaskLossKind::Focal,
            joint_kind: JointLossKind::Mse,
            model: HandModel::default(),
        }
    }
}

/// Value of the task terms on a batch plus the gradient of their weighted sum.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub terms: LossTerms<T>,
    pub grads: OutputGrads<T>,
    /// Samples whose palm geometry was degenerate and contributed 0 to the palmar term.
    pub palmar_skipped: usize,
}

/// Mask, joint, bone-length and palmar terms averaged over a batch. CORAL
/// needs two batches and is added by the caller.
pub fn batch_objective<T: Scalar>(
    fwd: &Forward<T>,
    masks: &[&HandMask],
    poses: &[&HandPose<T>],
    obj: &Objective,
) -> Result<BatchLoss<T>> {
    let n = fwd.batch_size();
    if poses.len() != n || (fwd.mask_logits.is_some() && masks.len() != n) {
        return Err(Error::Shape(format!(
            "batch of {n} outputs with {} masks and {} poses",
            masks.len(),
            poses.len()
        )));
    }
    let w = &obj.weights;
    let inv_n = T::one() / T::of(n as f64);
    let mut terms = LossTerms::default();
    let mut palmar_skipped = 0;

    let mask_grad = match &fwd.mask_logits {
        Some(logits) if w.alpha > 0.0 => {
            let mut g = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
            let scale = T::of(w.alpha) * inv_n;
            for i in 0..n {
                let (l, gi) = mask_loss_grad(logits.item(i), masks[i], obj.mask_kind, T::of(w.gamma_focal))?;
                terms.mask += l * inv_n;
                for (d, s) in g.item_mut(i).iter_mut().zip(gi) {
                    *d = s * scale;
                }
            }
            Some(g)
        }
        _ => None,
    };

    let mut gp = Tensor::zeros(n, fwd.pose.c, 1, 1);
    for i in 0..n {
        let pred_flat = fwd.pose.item(i);
        let truth = poses[i];
        let (lj, gj) = joint_loss_grad(pred_flat, &truth.to_flat(), obj.joint_kind)?;
        terms.joint += lj * inv_n;
        let out = gp.item_mut(i);
        if w.beta > 0.0 {
            let s = T::of(w.beta) * inv_n;
            for (o, g) in out.iter_mut().zip(gj) {
                *o += g * s;
            }
        }
        if w.gamma_pose == 0.0 && w.lambda == 0.0 {
            continue;
        }
        let pred = HandPose::from_flat(pred_flat)?;
        if w.gamma_pose > 0.0 {
            let (lb, gb) = bone_length_loss_grad(&pred, &obj.model);
            terms.bone_length += lb * inv_n;
            let s = T::of(w.gamma_pose) * inv_n;
            for (o, g) in out.iter_mut().zip(gb.iter().flatten()) {
                *o += *g * s;
            }
        }
        if w.lambda > 0.0 {
            match palmar_loss_grad(&pred, &obj.model) {
                Ok((lp, gpal)) => {
                    terms.palmar += lp * inv_n;
                    let s = T::of(w.lambda) * inv_n;
                    for (o, g) in out.iter_mut().zip(gpal.iter().flatten()) {
                        *o += *g * s;
                    }
                }
                Err(Error::DegenerateGeometry(_)) => palmar_skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    let pose_used = w.beta > 0.0 || w.gamma_pose > 0.0 || w.lambda > 0.0;
    Ok(BatchLoss {
        terms,
        grads: OutputGrads {
            latent: None,
            mask_logits: mask_grad,
            pose: pose_used.then_some(gp),
        },
        palmar_skipped,
    })
}
