//! The 21-joint hand skeleton rooted at the palm.
//!
//! Joint 0 is the palm root. Finger `q` (thumb, index, middle, ring, pinky)
//! owns joints `1 + 4q ..= 4 + 4q` in the order CMC, MCP, PIP, DIP. Bones
//! are ordered with the five CMC bones (root to CMC joint) first, followed by
//! the fifteen finger bones grouped per finger (MCP, PIP, DIP bone).

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::kv::KvConfig;
use crate::scalar::Scalar;

pub const NUM_JOINTS: usize = 21;
pub const NUM_BONES: usize = 20;
pub const NUM_FINGERS: usize = 5;
pub const NUM_CMC_BONES: usize = 5;
pub const NUM_FINGER_BONES: usize = 15;
pub const NUM_CMC_GAPS: usize = 4;
pub const ROOT: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Finger {
    Thumb = 0,
    Index = 1,
    Middle = 2,
    Ring = 3,
    Pinky = 4,
}

impl Finger {
    pub const ALL: [Finger; NUM_FINGERS] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Pinky,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JointKind {
    Cmc = 0,
    Mcp = 1,
    Pip = 2,
    Dip = 3,
}

/// Canonical joint index of a finger joint.
pub const fn joint_index(finger: Finger, kind: JointKind) -> usize {
    1 + 4 * finger as usize + kind as usize
}

/// Index of the joint used as the fingertip for tracking (index-finger DIP).
pub const FINGERTIP: usize = joint_index(Finger::Index, JointKind::Dip);

/// 21 x 3 joint coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct HandPose<T> {
    joints: [Vec3<T>; NUM_JOINTS],
}

impl<T: Scalar> HandPose<T> {
    pub fn new(joints: [Vec3<T>; NUM_JOINTS]) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("hand pose has non-finite coordinates".into()));
        }
        Ok(Self { joints })
    }

    pub fn zeros() -> Self {
        Self {
            joints: [[T::zero(); 3]; NUM_JOINTS],
        }
    }

    /// Builds a pose from 63 values laid out joint-major (x, y, z per joint).
    pub fn from_flat(values: &[T]) -> Result<Self> {
        if values.len() != NUM_JOINTS * 3 {
            return Err(Error::Shape(format!(
                "hand pose needs {} values, got {}",
                NUM_JOINTS * 3,
                values.len()
            )));
        }
        let mut joints = [[T::zero(); 3]; NUM_JOINTS];
        for (j, chunk) in joints.iter_mut().zip(values.chunks_exact(3)) {
            j.copy_from_slice(chunk);
        }
        Self::new(joints)
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn joints(&self) -> &[Vec3<T>; NUM_JOINTS] {
        &self.joints
    }

    pub fn joint(&self, i: usize) -> Vec3<T> {
        self.joints[i]
    }

    pub fn root(&self) -> Vec3<T> {
        self.joints[ROOT]
    }

    pub fn translated(&self, offset: Vec3<T>) -> Self {
        Self {
            joints: self.joints.map(|j| geom::add(j, offset)),
        }
    }

    /// Rigid rotation about `center`.
    pub fn rotated(&self, rot: &geom::Mat3<T>, center: Vec3<T>) -> Self {
        Self {
            joints: self
                .joints
                .map(|j| geom::add(center, geom::mat_vec(rot, geom::sub(j, center)))),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            joints: self.joints.map(|j| geom::scale(j, s)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> HandPose<U> {
        HandPose {
            joints: self.joints.map(|j| j.map(|v| U::of(v.as_f64()))),
        }
    }
}

/// Parent map, finger chains and bone order of the skeleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonTopology {
    parent: [Option<usize>; NUM_JOINTS],
    finger_groups: [[usize; 4]; NUM_FINGERS],
    bone_order: [(usize, usize); NUM_BONES],
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::canonical()
    }
}

impl SkeletonTopology {
    pub fn canonical() -> Self {
        let mut parent = [None; NUM_JOINTS];
        let mut finger_groups = [[0; 4]; NUM_FINGERS];
        let mut bone_order = [(0, 0); NUM_BONES];
        for q in 0..NUM_FINGERS {
            let base = 1 + 4 * q;
            finger_groups[q] = [base, base + 1, base + 2, base + 3];
            parent[base] = Some(ROOT);
            for k in 1..4 {
                parent[base + k] = Some(base + k - 1);
            }
            bone_order[q] = (ROOT, base);
            for k in 0..3 {
                bone_order[NUM_CMC_BONES + 3 * q + k] = (base + k, base + k + 1);
            }
        }
        Self {
            parent,
            finger_groups,
            bone_order,
        }
    }

    /// Builds and validates an arbitrary topology.
    pub fn new(
        parent: [Option<usize>; NUM_JOINTS],
        finger_groups: [[usize; 4]; NUM_FINGERS],
        bone_order: [(usize, usize); NUM_BONES],
    ) -> Result<Self> {
        let topo = Self {
            parent,
            finger_groups,
            bone_order,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn finger_groups(&self) -> &[[usize; 4]; NUM_FINGERS] {
        &self.finger_groups
    }

    pub fn bone_order(&self) -> &[(usize, usize); NUM_BONES] {
        &self.bone_order
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Topology(msg));
        if self.parent[ROOT].is_some() {
            return bad("root joint must not have a parent".into());
        }
        for (i, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                None => return bad(format!("joint {i} has no parent")),
                Some(p) if *p >= NUM_JOINTS || *p == i => {
                    return bad(format!("joint {i} has invalid parent {p}"))
                }
                Some(_) => {}
            }
            // Walking up must reach the root without revisiting a joint.
            let mut cur = i;
            for step in 0..=NUM_JOINTS {
                match self.parent[cur] {
                    None => break,
                    Some(p) => cur = p,
                }
                if step == NUM_JOINTS {
                    return bad(format!("cycle through joint {i}"));
                }
            }
            if cur != ROOT {
                return bad(format!("joint {i} is not connected to the root"));
            }
        }
        let mut seen = [false; NUM_JOINTS];
        for (k, &(p, c)) in self.bone_order.iter().enumerate() {
            if c >= NUM_JOINTS || c == ROOT || self.parent[c] != Some(p) {
                return bad(format!("bone {k} ({p}->{c}) does not follow the parent map"));
            }
            if std::mem::replace(&mut seen[c], true) {
                return bad(format!("joint {c} is the child of two bones"));
            }
        }
        for (q, group) in self.finger_groups.iter().enumerate() {
            if self.parent[group[0]] != Some(ROOT) {
                return bad(format!("finger {q}: CMC joint must hang off the root"));
            }
            for k in 1..4 {
                if self.parent[group[k]] != Some(group[k - 1]) {
                    return bad(format!("finger {q}: joints do not form a chain"));
                }
            }
            if self.bone_order[q] != (ROOT, group[0]) {
                return bad(format!("bone {q} must be the CMC bone of finger {q}"));
            }
            for k in 0..3 {
                if self.bone_order[NUM_CMC_BONES + 3 * q + k] != (group[k], group[k + 1]) {
                    return bad(format!("finger bones of finger {q} out of order"));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        for (i, p) in self.parent.iter().enumerate().skip(1) {
            kv.set(&format!("parent.{i}"), p.map_or(-1, |p| p as i64));
        }
        for (q, g) in self.finger_groups.iter().enumerate() {
            kv.set(&format!("finger.{q}"), crate::kv::join(g));
        }
        for (k, (p, c)) in self.bone_order.iter().enumerate() {
            kv.set(&format!("bone.{k}"), format!("{p},{c}"));
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut parent = [None; NUM_JOINTS];
        for (i, slot) in parent.iter_mut().enumerate().skip(1) {
            let p: i64 = kv.parse_req(&format!("parent.{i}"))?;
            *slot = usize::try_from(p).ok();
        }
        let mut finger_groups = [[0; 4]; NUM_FINGERS];
        for (q, g) in finger_groups.iter_mut().enumerate() {
            let v: Vec<usize> = kv.list_req(&format!("finger.{q}"))?;
            *g = v
                .try_into()
                .map_err(|_| Error::Config(format!("finger.{q} needs 4 joints")))?;
        }
        let mut bone_order = [(0, 0); NUM_BONES];
        for (k, b) in bone_order.iter_mut().enumerate() {
            let v: Vec<usize> = kv.list_req(&format!("bone.{k}"))?;
            match v.as_slice() {
                [p, c] => *b = (*p, *c),
                _ => return Err(Error::Config(format!("bone.{k} needs parent,child"))),
            }
        }
        Self::new(parent, finger_groups, bone_order)
    }
}

/// 20 bone vectors (child minus parent) in topology bone order.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneVectors<T> {
    pub bones: [Vec3<T>; NUM_BONES],
}

impl<T: Scalar> BoneVectors<T> {
    pub fn cmc(&self) -> &[Vec3<T>] {
        &self.bones[..NUM_CMC_BONES]
    }

    pub fn finger(&self) -> &[Vec3<T>] {
        &self.bones[NUM_CMC_BONES..]
    }

    pub fn lengths(&self) -> [T; NUM_BONES] {
        self.bones.map(geom::norm)
    }
}

pub fn bones_from_joints<T: Scalar>(
    pose: &HandPose<T>,
    topo: &SkeletonTopology,
) -> Result<BoneVectors<T>> {
    topo.validate()?;
    Ok(bones_unchecked(pose, topo))
}

pub(crate) fn bones_unchecked<T: Scalar>(pose: &HandPose<T>, topo: &SkeletonTopology) -> BoneVectors<T> {
    BoneVectors {
        bones: topo
            .bone_order
            .map(|(p, c)| geom::sub(pose.joints[c], pose.joints[p])),
    }
}

/// Rebuilds joints from the root position and bone vectors.
pub fn joints_from_bones<T: Scalar>(
    root: Vec3<T>,
    bones: &BoneVectors<T>,
    topo: &SkeletonTopology,
) -> Result<HandPose<T>> {
    topo.validate()?;
    let mut joints = [[T::zero(); 3]; NUM_JOINTS];
    let mut placed = [false; NUM_JOINTS];
    joints[ROOT] = root;
    placed[ROOT] = true;
    // Bone order need not be parent-first in general; sweep until settled.
    let mut remaining = NUM_BONES;
    while remaining > 0 {
        let before = remaining;
        for (k, &(p, c)) in topo.bone_order.iter().enumerate() {
            if placed[p] && !placed[c] {
                joints[c] = geom::add(joints[p], bones.bones[k]);
                placed[c] = true;
                remaining -= 1;
            }
        }
        if remaining == before {
            return Err(Error::Topology("bones do not reach every joint".into()));
        }
    }
    HandPose::new(joints)
}

/// Accumulates bone-space gradients onto the joints (bone = child - parent).
pub fn bone_grads_to_joints<T: Scalar>(
    grad_bones: &[Vec3<T>; NUM_BONES],
    topo: &SkeletonTopology,
) -> [Vec3<T>; NUM_JOINTS] {
    let mut out = [[T::zero(); 3]; NUM_JOINTS];
    for (g, &(p, c)) in grad_bones.iter().zip(topo.bone_order.iter()) {
        geom::add_assign(&mut out[c], *g);
        geom::add_assign(&mut out[p], geom::neg(*g));
    }
    out
}

/// Zero inside `[a, b]`, linear distance to the interval outside.
pub fn range_penalty<T: Scalar>(x: T, a: T, b: T) -> Result<T> {
    if a > b {
        return Err(Error::Argument(format!("range lower bound {a} exceeds upper {b}")));
    }
    Ok(range_penalty_unchecked(x, a, b))
}

#[inline]
pub(crate) fn range_penalty_unchecked<T: Scalar>(x: T, a: T, b: T) -> T {
    (a - x).max(T::zero()) + (x - b).max(T::zero())
}

/// Subgradient of [`range_penalty`] in `x`: -1 below, +1 above, 0 inside.
#[inline]
pub fn range_penalty_slope<T: Scalar>(x: T, a: T, b: T) -> T {
    if x < a {
        -T::one()
    } else if x > b {
        T::one()
    } else {
        T::zero()
    }
}

fn degenerate_tol<T: Scalar>() -> T {
    T::epsilon() * T::of(64.0)
}

fn cmc_bones<T: Scalar>(bones: &BoneVectors<T>) -> Result<[Vec3<T>; NUM_CMC_BONES]> {
    let mut out = [[T::zero(); 3]; NUM_CMC_BONES];
    for (i, b) in bones.cmc().iter().enumerate() {
        if !(geom::norm(*b) > T::zero()) {
            return Err(Error::DegenerateGeometry(format!("CMC bone {i} has zero length")));
        }
        out[i] = *b;
    }
    Ok(out)
}

/// The four angles between adjacent CMC bones, each in `[0, pi]`.
pub fn cmc_angles<T: Scalar>(bones: &BoneVectors<T>) -> Result<[T; NUM_CMC_GAPS]> {
    let b = cmc_bones(bones)?;
    Ok(std::array::from_fn(|i| {
        let cos = geom::dot(b[i], b[i + 1]) / (geom::norm(b[i]) * geom::norm(b[i + 1]));
        cos.max(-T::one()).min(T::one()).acos()
    }))
}

/// Gradient of `sum_i upstream[i] * phi_i` with respect to the five CMC bones.
///
/// The gradient is taken as zero where the cosine sits on the clamp boundary.
pub fn cmc_angles_backward<T: Scalar>(
    bones: &BoneVectors<T>,
    upstream: &[T; NUM_CMC_GAPS],
) -> Result<[Vec3<T>; NUM_CMC_BONES]> {
    let b = cmc_bones(bones)?;
    let mut grad = [[T::zero(); 3]; NUM_CMC_BONES];
    for i in 0..NUM_CMC_GAPS {
        if upstream[i] == T::zero() {
            continue;
        }
        let (u, v) = (b[i], b[i + 1]);
        let (nu, nv) = (geom::norm(u), geom::norm(v));
        let cos = geom::dot(u, v) / (nu * nv);
        if cos >= T::one() || cos <= -T::one() {
            continue;
        }
        let dphi = -upstream[i] / (T::one() - cos * cos).sqrt();
        // d cos / du = v / (|u||v|) - cos * u / |u|^2
        let du = geom::sub(geom::scale(v, T::one() / (nu * nv)), geom::scale(u, cos / (nu * nu)));
        let dv = geom::sub(geom::scale(u, T::one() / (nu * nv)), geom::scale(v, cos / (nv * nv)));
        geom::add_assign(&mut grad[i], geom::scale(du, dphi));
        geom::add_assign(&mut grad[i + 1], geom::scale(dv, dphi));
    }
    Ok(grad)
}

/// Intermediate quantities of the discrete palm curvature.
struct CurvatureParts<T> {
    b: [Vec3<T>; NUM_CMC_BONES],
    cross: [Vec3<T>; NUM_CMC_GAPS],
    cross_len: [T; NUM_CMC_GAPS],
    normals: [Vec3<T>; NUM_CMC_GAPS],
    sums: [Vec3<T>; NUM_CMC_BONES],
    sum_len: [T; NUM_CMC_BONES],
    edges: [Vec3<T>; NUM_CMC_BONES],
    curv: [T; NUM_CMC_GAPS],
}

fn curvature_parts<T: Scalar>(bones: &BoneVectors<T>) -> Result<CurvatureParts<T>> {
    let b = cmc_bones(bones)?;
    let tol = degenerate_tol::<T>();
    let zero3 = [T::zero(); 3];
    let mut cross = [zero3; NUM_CMC_GAPS];
    let mut cross_len = [T::zero(); NUM_CMC_GAPS];
    let mut normals = [zero3; NUM_CMC_GAPS];
    for i in 0..NUM_CMC_GAPS {
        let x = geom::cross(b[i + 1], b[i]);
        let len = geom::norm(x);
        if !(len > tol * geom::norm(b[i]) * geom::norm(b[i + 1])) {
            return Err(Error::DegenerateGeometry(format!(
                "CMC bones {i} and {} are parallel",
                i + 1
            )));
        }
        cross[i] = x;
        cross_len[i] = len;
        normals[i] = geom::scale(x, T::one() / len);
    }
    // Edge normals: the two ends take the adjacent face normal, interior
    // edges the normalized average of both neighbours.
    let mut sums = [zero3; NUM_CMC_BONES];
    let mut sum_len = [T::one(); NUM_CMC_BONES];
    let mut edges = [zero3; NUM_CMC_BONES];
    edges[0] = normals[0];
    edges[NUM_CMC_BONES - 1] = normals[NUM_CMC_GAPS - 1];
    for i in 1..NUM_CMC_BONES - 1 {
        let s = geom::add(normals[i], normals[i - 1]);
        let len = geom::norm(s);
        if !(len > tol) {
            return Err(Error::DegenerateGeometry(format!(
                "palm folds back on itself at CMC bone {i}"
            )));
        }
        sums[i] = s;
        sum_len[i] = len;
        edges[i] = geom::scale(s, T::one() / len);
    }
    let mut curv = [T::zero(); NUM_CMC_GAPS];
    for i in 0..NUM_CMC_GAPS {
        let db = geom::sub(b[i + 1], b[i]);
        let q = geom::dot(db, db);
        if !(q > T::zero()) {
            return Err(Error::DegenerateGeometry(format!(
                "CMC bones {i} and {} coincide",
                i + 1
            )));
        }
        curv[i] = geom::dot(geom::sub(edges[i + 1], edges[i]), db) / q;
    }
    Ok(CurvatureParts {
        b,
        cross,
        cross_len,
        normals,
        sums,
        sum_len,
        edges,
        curv,
    })
}

/// Discrete curvature across the four gaps between adjacent CMC bones.
pub fn cmc_curvatures<T: Scalar>(bones: &BoneVectors<T>) -> Result<[T; NUM_CMC_GAPS]> {
    Ok(curvature_parts(bones)?.curv)
}

/// Backward of `x / |x|`: projects the upstream gradient off `x`.
fn normalize_backward<T: Scalar>(unit: Vec3<T>, len: T, g: Vec3<T>) -> Vec3<T> {
    geom::scale(geom::sub(g, geom::scale(unit, geom::dot(unit, g))), T::one() / len)
}

/// Gradient of `sum_i upstream[i] * c_i` with respect to the five CMC bones.
pub fn cmc_curvatures_backward<T: Scalar>(
    bones: &BoneVectors<T>,
    upstream: &[T; NUM_CMC_GAPS],
) -> Result<[Vec3<T>; NUM_CMC_BONES]> {
    let p = curvature_parts(bones)?;
    let zero3 = [T::zero(); 3];
    let mut g_b = [zero3; NUM_CMC_BONES];
    let mut g_e = [zero3; NUM_CMC_BONES];
    for i in 0..NUM_CMC_GAPS {
        let g = upstream[i];
        if g == T::zero() {
            continue;
        }
        let db = geom::sub(p.b[i + 1], p.b[i]);
        let de = geom::sub(p.edges[i + 1], p.edges[i]);
        let q = geom::dot(db, db);
        let ge = geom::scale(db, g / q);
        let gb = geom::scale(geom::sub(de, geom::scale(db, T::of(2.0) * p.curv[i])), g / q);
        geom::add_assign(&mut g_e[i + 1], ge);
        geom::add_assign(&mut g_e[i], geom::neg(ge));
        geom::add_assign(&mut g_b[i + 1], gb);
        geom::add_assign(&mut g_b[i], geom::neg(gb));
    }
    let mut g_n = [zero3; NUM_CMC_GAPS];
    geom::add_assign(&mut g_n[0], g_e[0]);
    geom::add_assign(&mut g_n[NUM_CMC_GAPS - 1], g_e[NUM_CMC_BONES - 1]);
    for i in 1..NUM_CMC_BONES - 1 {
        let gs = normalize_backward(p.edges[i], p.sum_len[i], g_e[i]);
        debug_assert!(geom::norm(p.sums[i]) > T::zero());
        geom::add_assign(&mut g_n[i], gs);
        geom::add_assign(&mut g_n[i - 1], gs);
    }
    for i in 0..NUM_CMC_GAPS {
        let gx = normalize_backward(p.normals[i], p.cross_len[i], g_n[i]);
        debug_assert!(geom::norm(p.cross[i]) > T::zero());
        // x = b[i+1] x b[i]
        geom::add_assign(&mut g_b[i + 1], geom::cross(p.b[i], gx));
        geom::add_assign(&mut g_b[i], geom::cross(gx, p.b[i + 1]));
    }
    Ok(g_b)
}

/// Valid length range of each of the 15 finger bones, in pose units.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneLengthTable {
    pub ranges: [(f64, f64); NUM_FINGER_BONES],
}

impl BoneLengthTable {
    pub fn new(ranges: [(f64, f64); NUM_FINGER_BONES]) -> Result<Self> {
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("bone length range {k}: [{lo}, {hi}]")));
            }
        }
        Ok(Self { ranges })
    }

    pub fn contains(&self, bone: usize, length: f64) -> bool {
        let (lo, hi) = self.ranges[bone];
        (lo..=hi).contains(&length)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        for (k, (lo, hi)) in self.ranges.iter().enumerate() {
            kv.set(&format!("bone_length.{k}"), format!("{lo},{hi}"));
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut ranges = [(0.0, 0.0); NUM_FINGER_BONES];
        for (k, r) in ranges.iter_mut().enumerate() {
            *r = pair(kv, &format!("bone_length.{k}"))?;
        }
        Self::new(ranges)
    }
}

/// Angular and curvature ranges for the four gaps between CMC bones.
#[derive(Clone, Debug, PartialEq)]
pub struct PalmarConstraintTable {
    pub angle: [(f64, f64); NUM_CMC_GAPS],
    pub curvature: [(f64, f64); NUM_CMC_GAPS],
}

impl PalmarConstraintTable {
    pub fn new(
        angle: [(f64, f64); NUM_CMC_GAPS],
        curvature: [(f64, f64); NUM_CMC_GAPS],
    ) -> Result<Self> {
        for (i, &(lo, hi)) in angle.iter().enumerate() {
            if !(0.0 <= lo && lo <= hi && hi <= std::f64::consts::PI) {
                return Err(Error::Config(format!("angle range {i}: [{lo}, {hi}]")));
            }
        }
        for (i, &(lo, hi)) in curvature.iter().enumerate() {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Config(format!("curvature range {i}: [{lo}, {hi}]")));
            }
        }
        Ok(Self { angle, curvature })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        for (i, (lo, hi)) in self.angle.iter().enumerate() {
            kv.set(&format!("angle.{i}"), format!("{lo},{hi}"));
        }
        for (i, (lo, hi)) in self.curvature.iter().enumerate() {
            kv.set(&format!("curvature.{i}"), format!("{lo},{hi}"));
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut angle = [(0.0, 0.0); NUM_CMC_GAPS];
        let mut curvature = [(0.0, 0.0); NUM_CMC_GAPS];
        for i in 0..NUM_CMC_GAPS {
            angle[i] = pair(kv, &format!("angle.{i}"))?;
            curvature[i] = pair(kv, &format!("curvature.{i}"))?;
        }
        Self::new(angle, curvature)
    }
}

fn pair(kv: &KvConfig, key: &str) -> Result<(f64, f64)> {
    match kv.list_req::<f64>(key)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("`{key}` needs min,max"))),
    }
}

/// Topology plus both constraint tables, as consumed by the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    pub topology: SkeletonTopology,
    pub bone_lengths: BoneLengthTable,
    pub palmar: PalmarConstraintTable,
}

impl Default for HandModel {
    fn default() -> Self {
        Self {
            topology: SkeletonTopology::canonical(),
            bone_lengths: crate::synth_sim::default_bone_length_table(),
            palmar: crate::synth_sim::default_palmar_table(),
        }
    }
}

impl HandModel {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.topology.to_kv();
        for table in [self.bone_lengths.to_kv(), self.palmar.to_kv()] {
            for key in table.keys() {
                kv.set(key, table.get(key).unwrap_or_default());
            }
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Ok(Self {
            topology: SkeletonTopology::from_kv(kv)?,
            bone_lengths: BoneLengthTable::from_kv(kv)?,
            palmar: PalmarConstraintTable::from_kv(kv)?,
        })
    }
}
