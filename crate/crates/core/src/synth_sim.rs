//! Synthetic ground truth: a forward-kinematic hand sampler, an orthographic
//! capsule renderer for masks, and a point-reflector multipath channel that
//! turns poses into CSI.
//!
//! Pose coordinates are normalized units of 20 cm. A pose maps to metres as
//! `(p - 0.5) * 0.2 + hand_center + domain.offset`.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::csi_processing::CsiSample;
use crate::dataset_io::{Dataset, DatasetMeta, GestureEntry};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::hand_model::{
    bones_unchecked, cmc_angles, cmc_curvatures, BoneLengthTable, HandModel, HandPose,
    PalmarConstraintTable, SkeletonTopology, NUM_CMC_GAPS, NUM_FINGERS, NUM_FINGER_BONES, NUM_JOINTS,
    ROOT,
};
use crate::mask::HandMask;
use crate::kv::KvConfig;

pub const CM_PER_UNIT: f64 = 20.0;
pub const METRES_PER_UNIT: f64 = CM_PER_UNIT / 100.0;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const FINGER_RADIUS: f64 = 0.035;
const SAMPLE_BUDGET: usize = 1000;

/// Nominal (root->CMC, CMC->MCP, MCP->PIP, PIP->DIP) lengths per finger, thumb first.
const SEGMENT_LENGTHS: [[f64; 4]; NUM_FINGERS] = [
    [0.08, 0.12, 0.11, 0.08],
    [0.10, 0.16, 0.13, 0.08],
    [0.10, 0.17, 0.14, 0.09],
    [0.10, 0.16, 0.13, 0.085],
    [0.09, 0.14, 0.10, 0.07],
];
/// Angle of each CMC bone from the palm's long axis, radians.
const CMC_FAN: [f64; NUM_FINGERS] = [-0.75, -0.2, 0.0, 0.18, 0.36];
/// Out-of-plane lift each CMC bone receives per unit of cupping.
const CUP_LIFT: [f64; NUM_FINGERS] = [0.6, 0.15, 0.0, 0.1, 0.3];
/// Direction of each finger beyond its CMC joint, radians.
const FINGER_FAN: [f64; NUM_FINGERS] = [-0.95, -0.22, 0.0, 0.2, 0.4];
/// Maximum flexion of the (CMC->MCP, MCP->PIP, PIP->DIP) segments at full curl.
const CURL_ANGLES: [[f64; 3]; NUM_FINGERS] = [
    [0.2, 0.7, 0.8],
    [0.15, 1.4, 1.5],
    [0.15, 1.4, 1.5],
    [0.15, 1.4, 1.5],
    [0.15, 1.4, 1.5],
];
const ROOT_POSITION: Vec3<f64> = [0.5, 0.27, 0.5];

/// Finger curls (0 extended, 1 fully bent) and splay of one gesture class.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureTemplate {
    pub id: u32,
    pub name: String,
    pub curls: [f64; NUM_FINGERS],
    pub spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GestureSet {
    /// 26 letter-like postures plus the open hand (class 26).
    Postures,
    /// Nine counting gestures.
    Digits,
    /// Uniformly random curls, no class label.
    Free,
}

impl std::str::FromStr for GestureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "postures" => Ok(Self::Postures),
            "digits" => Ok(Self::Digits),
            "free" => Ok(Self::Free),
            other => Err(Error::Config(format!("unknown gesture set `{other}`"))),
        }
    }
}

pub const NUM_POSTURES: usize = 27;
pub const OPEN_HAND: u32 = 26;
pub const NUM_DIGITS: usize = 9;

impl GestureSet {
    pub fn templates(self) -> Vec<GestureTemplate> {
        match self {
            GestureSet::Postures => {
                let mut out: Vec<GestureTemplate> = (1..NUM_POSTURES as u32)
                    .map(|k| {
                        // Walk the 3^5 curl lattice with a stride coprime to 243.
                        let mut code = (k as usize * 47) % 243;
                        let mut curls = [0.0; NUM_FINGERS];
                        for c in curls.iter_mut() {
                            *c = (code % 3) as f64 * 0.5;
                            code /= 3;
                        }
                        GestureTemplate {
                            id: k - 1,
                            name: char::from(b'A' + (k - 1) as u8).to_string(),
                            curls,
                            spread: (k % 3) as f64 * 0.5,
                        }
                    })
                    .collect();
                out.push(GestureTemplate {
                    id: OPEN_HAND,
                    name: "open".into(),
                    curls: [0.0; NUM_FINGERS],
                    spread: 1.0,
                });
                out
            }
            GestureSet::Digits => {
                const CURLS: [[f64; NUM_FINGERS]; NUM_DIGITS] = [
                    [1.0, 0.0, 1.0, 1.0, 1.0],
                    [1.0, 0.0, 0.0, 1.0, 1.0],
                    [1.0, 0.0, 0.0, 0.0, 1.0],
                    [1.0, 0.0, 0.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0, 0.0],
                    [0.0, 1.0, 1.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0, 1.0, 1.0],
                    [0.0, 0.0, 0.0, 1.0, 1.0],
                    [0.5, 0.5, 0.5, 0.5, 0.5],
                ];
                CURLS
                    .iter()
                    .enumerate()
                    .map(|(k, &curls)| GestureTemplate {
                        id: k as u32,
                        name: (k + 1).to_string(),
                        curls,
                        spread: 0.5,
                    })
                    .collect()
            }
            GestureSet::Free => Vec::new(),
        }
    }
}

/// Latent parameters of one hand configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub scale: f64,
    pub segment_jitter: [[f64; 4]; NUM_FINGERS],
    pub fan_jitter: [f64; NUM_FINGERS],
    pub cupping: f64,
    pub spread: f64,
    pub curls: [f64; NUM_FINGERS],
    /// Yaw, pitch and roll of the whole hand about its root.
    pub orientation: [f64; 3],
    pub root: Vec3<f64>,
}

impl PoseParams {
    /// Draws parameters; a template fixes curls and splay up to small jitter.
    pub fn sample<R: Rng>(rng: &mut R, template: Option<&GestureTemplate>) -> Self {
        let mut u = |a: f64, b: f64| rng.random_range(a..=b);
        let scale = u(0.9, 1.1);
        let segment_jitter = std::array::from_fn(|_| std::array::from_fn(|_| u(0.95, 1.05)));
        let fan_jitter = std::array::from_fn(|_| u(-0.04, 0.04));
        let cupping = u(0.0, 0.3);
        let (curls, spread) = match template {
            Some(t) => (
                t.curls.map(|c| (c + u(-0.08, 0.08)).clamp(0.0, 1.0)),
                (t.spread + u(-0.1, 0.1)).clamp(0.0, 1.0),
            ),
            None => (std::array::from_fn(|_| u(0.0, 1.0)), u(0.0, 1.0)),
        };
        let orientation = [u(-0.25, 0.25), u(-0.15, 0.15), u(-0.15, 0.15)];
        let root = [
            ROOT_POSITION[0] + u(-0.03, 0.03),
            ROOT_POSITION[1] + u(-0.03, 0.03),
            ROOT_POSITION[2] + u(-0.03, 0.03),
        ];
        Self {
            scale,
            segment_jitter,
            fan_jitter,
            cupping,
            spread,
            curls,
            orientation,
            root,
        }
    }

    /// Jitter-free pose: nominal lengths, level orientation.
    pub fn nominal(curls: [f64; NUM_FINGERS], spread: f64) -> Self {
        Self {
            scale: 1.0,
            segment_jitter: [[1.0; 4]; NUM_FINGERS],
            fan_jitter: [0.0; NUM_FINGERS],
            cupping: 0.15,
            spread,
            curls,
            orientation: [0.0; 3],
            root: ROOT_POSITION,
        }
    }

    /// Forward kinematics; joint slots follow `topo`.
    pub fn build(&self, topo: &SkeletonTopology) -> Result<HandPose<f64>> {
        let down = [0.0, 0.0, -1.0];
        let mut local = [[0.0; 3]; NUM_JOINTS];
        for (q, chain) in topo.finger_groups().iter().enumerate() {
            let len = |s: usize| SEGMENT_LENGTHS[q][s] * self.segment_jitter[q][s] * self.scale;
            let fan = CMC_FAN[q] + self.fan_jitter[q];
            let cmc_dir = normalize([fan.sin(), fan.cos(), self.cupping * CUP_LIFT[q]]);
            let cmc = geom::scale(cmc_dir, len(0));
            let splay = FINGER_FAN[q] + self.fan_jitter[q] + self.spread * 0.06 * (q as f64 - 2.0);
            let tilt = if q == 0 { -0.3 } else { 0.0 };
            let u = normalize([splay.sin(), splay.cos(), tilt]);
            let axis = normalize(geom::cross(u, down));
            let mut bend = 0.0;
            let mut p = cmc;
            local[chain[0]] = cmc;
            for s in 0..3 {
                bend += CURL_ANGLES[q][s] * self.curls[q];
                let dir = geom::mat_vec(&geom::axis_angle(axis, bend), u);
                p = geom::add(p, geom::scale(dir, len(s + 1)));
                local[chain[s + 1]] = p;
            }
        }
        let [yaw, pitch, roll] = self.orientation;
        let rot = geom::euler_zyx(yaw, pitch, roll);
        let joints = local.map(|j| geom::add(self.root, geom::mat_vec(&rot, j)));
        debug_assert_eq!(joints[ROOT], self.root);
        HandPose::new(joints)
    }
}

fn normalize(v: Vec3<f64>) -> Vec3<f64> {
    geom::scale(v, 1.0 / geom::norm(v))
}

/// True when every constraint of `model` holds exactly.
pub fn satisfies_constraints(pose: &HandPose<f64>, model: &HandModel) -> bool {
    let bones = bones_unchecked(pose, &model.topology);
    let lengths_ok = bones
        .finger()
        .iter()
        .enumerate()
        .all(|(k, b)| model.bone_lengths.contains(k, geom::norm(*b)));
    if !lengths_ok {
        return false;
    }
    let (Ok(angles), Ok(curv)) = (cmc_angles(&bones), cmc_curvatures(&bones)) else {
        return false;
    };
    (0..NUM_CMC_GAPS).all(|i| {
        let (alo, ahi) = model.palmar.angle[i];
        let (clo, chi) = model.palmar.curvature[i];
        (alo..=ahi).contains(&angles[i]) && (clo..=chi).contains(&curv[i])
    })
}

/// Rejection-samples a pose that satisfies `model`'s tables.
pub fn sample_pose_with<R: Rng>(rng: &mut R, model: &HandModel, template: Option<&GestureTemplate>) -> Result<(PoseParams, HandPose<f64>)> {
    for _ in 0..SAMPLE_BUDGET {
        let params = PoseParams::sample(rng, template);
        let pose = params.build(&model.topology)?;
        if satisfies_constraints(&pose, model) {
            return Ok((params, pose));
        }
    }
    Err(Error::Generation(format!(
        "no pose inside the constraint tables after {SAMPLE_BUDGET} draws"
    )))
}

/// Deterministic pose for a seed, with free finger curls.
pub fn sample_pose(seed: u64, model: &HandModel) -> Result<HandPose<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_pose_with(&mut rng, model, None)?.1)
}

/// Min/max of each constrained quantity over `n` unconstrained draws,
/// widened on both sides by `widen` times the observed width.
pub fn derive_constraint_tables(n: usize, seed: u64, widen: f64) -> Result<(BoneLengthTable, PalmarConstraintTable)> {
    let topo = SkeletonTopology::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bones = [(f64::INFINITY, f64::NEG_INFINITY); NUM_FINGER_BONES];
    let mut angle = [(f64::INFINITY, f64::NEG_INFINITY); NUM_CMC_GAPS];
    let mut curvature = [(f64::INFINITY, f64::NEG_INFINITY); NUM_CMC_GAPS];
    let grow = |r: &mut (f64, f64), v: f64| {
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    };
    for _ in 0..n {
        let pose = PoseParams::sample(&mut rng, None).build(&topo)?;
        let b = bones_unchecked(&pose, &topo);
        for (k, v) in b.finger().iter().enumerate() {
            grow(&mut bones[k], geom::norm(*v));
        }
        for (i, v) in cmc_angles(&b)?.into_iter().enumerate() {
            grow(&mut angle[i], v);
        }
        for (i, v) in cmc_curvatures(&b)?.into_iter().enumerate() {
            grow(&mut curvature[i], v);
        }
    }
    let widen_all = |r: (f64, f64)| {
        let w = (r.1 - r.0) * widen;
        (r.0 - w, r.1 + w)
    };
    let angle = angle.map(|r| {
        let (lo, hi) = widen_all(r);
        (lo.max(0.0), hi.min(std::f64::consts::PI))
    });
    Ok((
        BoneLengthTable::new(bones.map(widen_all))?,
        PalmarConstraintTable::new(angle, curvature.map(widen_all))?,
    ))
}

/// Finger-bone length ranges of the sampler, frozen from 1e5 draws with 10% margin.
pub fn default_bone_length_table() -> BoneLengthTable {
    BoneLengthTable::new(FROZEN_BONE_LENGTHS).expect("frozen table is valid")
}

/// CMC angle and curvature ranges of the sampler, frozen like the bone table.
pub fn default_palmar_table() -> PalmarConstraintTable {
    PalmarConstraintTable::new(FROZEN_ANGLES, FROZEN_CURVATURES).expect("frozen table is valid")
}

const FROZEN_BONE_LENGTHS: [(f64, f64); NUM_FINGER_BONES] = [
    (0.0991, 0.1422),
    (0.0908, 0.1303),
    (0.066, 0.0948),
    (0.132, 0.1895),
    (0.1073, 0.154),
    (0.066, 0.0948),
    (0.1404, 0.2014),
    (0.1155, 0.1658),
    (0.0742, 0.1067),
    (0.132, 0.1896),
    (0.1072, 0.1541),
    (0.0702, 0.1007),
    (0.1155, 0.1659),
    (0.0825, 0.1185),
    (0.0577, 0.0829),
];
const FROZEN_ANGLES: [(f64, f64); NUM_CMC_GAPS] = [
    (0.454, 0.6554),
    (0.1048, 0.2981),
    (0.0846, 0.2763),
    (0.0839, 0.2811),
];
const FROZEN_CURVATURES: [(f64, f64); NUM_CMC_GAPS] = [
    (-1.5573, 0.9639),
    (-17.7061, 1.6096),
    (-27.2134, 2.4739),
    (-18.5314, 2.4812),
];

/// Orthographic view of the x-y plane onto a square pixel grid; image rows grow downward.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub center: [f64; 2],
    pub pixels_per_unit: f64,
    pub side: usize,
}

impl Default for Projection {
    fn default() -> Self {
        Self {
            center: [0.5, 0.5],
            pixels_per_unit: 140.0,
            side: crate::mask::DEFAULT_MASK_SIDE,
        }
    }
}

impl Projection {
    /// Same field of view as the default, sampled on a `side x side` grid.
    pub fn with_side(side: usize) -> Self {
        let d = Self::default();
        Self {
            pixels_per_unit: d.pixels_per_unit * side as f64 / d.side as f64,
            side,
            ..d
        }
    }

    /// Continuous (column, row) of a point; pixel `(r, c)` covers `[c, c+1) x [r, r+1)`.
    pub fn to_pixel(&self, p: Vec3<f64>) -> [f64; 2] {
        let half = self.side as f64 / 2.0;
        [
            (p[0] - self.center[0]) * self.pixels_per_unit + half,
            (self.center[1] - p[1]) * self.pixels_per_unit + half,
        ]
    }
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let turn = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0] * d[0] + d[1] * d[1]
}

/// Palm polygon plus a capsule around every bone, sampled at pixel centres.
pub fn render_mask(pose: &HandPose<f64>, proj: &Projection) -> Result<HandMask> {
    let topo = SkeletonTopology::canonical();
    let side = proj.side as f64;
    let px: Vec<[f64; 2]> = pose.joints().iter().map(|&j| proj.to_pixel(j)).collect();
    if let Some(j) = px.iter().position(|p| !(p[0] >= 0.0 && p[0] < side && p[1] >= 0.0 && p[1] < side)) {
        return Err(Error::Render(format!("joint {j} projects outside the {0}x{0} frame", proj.side)));
    }
    let mut palm: Vec<[f64; 2]> = vec![px[ROOT]];
    for chain in topo.finger_groups() {
        palm.push(px[chain[0]]);
    }
    for chain in &topo.finger_groups()[1..] {
        palm.push(px[chain[1]]);
    }
    let hull = convex_hull(palm);
    let r = FINGER_RADIUS * proj.pixels_per_unit;
    let segs: Vec<([f64; 2], [f64; 2])> = topo.bone_order().iter().map(|&(p, c)| (px[p], px[c])).collect();
    let mut mask = HandMask::zeros(proj.side);
    for row in 0..proj.side {
        for col in 0..proj.side {
            let p = [col as f64 + 0.5, row as f64 + 0.5];
            let hit = inside_convex(&hull, p) || segs.iter().any(|&(a, b)| segment_dist2(p, a, b) <= r * r);
            if hit {
                mask.set(row, col, true);
            }
        }
    }
    if mask.count() == 0 {
        return Err(Error::Render("pose covers no pixels".into()));
    }
    if mask.components() != 1 {
        return Err(Error::Render("hand pixels are not connected".into()));
    }
    Ok(mask)
}

/// Hand placement relative to the transceivers and the static environment.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: u32,
    /// Shift of the hand region in metres.
    pub offset: Vec3<f64>,
    pub env_seed: u64,
}

/// `k` domains on a small ring around the nominal hand position, each in
/// its own static environment.
pub fn default_domains(k: usize) -> Vec<DomainSpec> {
    (0..k)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / k.max(1) as f64;
            let r = if i == 0 { 0.0 } else { 0.03 };
            DomainSpec {
                id: i as u32,
                offset: [r * a.cos(), r * a.sin(), 0.01 * i as f64],
                env_seed: 0xD0_0000 + i as u64,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub subcarriers: usize,
    pub packets: usize,
    pub antennas: usize,
    pub tx: Vec3<f64>,
    /// Centre of the receive array; antennas sit half a wavelength apart along y.
    pub rx_center: Vec3<f64>,
    /// Metres position of pose point (0.5, 0.5, 0.5).
    pub hand_center: Vec3<f64>,
    pub static_paths: usize,
    pub static_gain: (f64, f64),
    pub noise_std: f64,
    /// Scale of reflector gain `k * area / (d_tx * d_rx)`.
    pub reflectivity: f64,
    pub palm_area: f64,
    pub finger_width: f64,
    /// Amplitude of the per-packet vertical hand motion, pose units.
    pub jitter: f64,
    pub hand_enabled: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 5.26e9,
            subcarrier_spacing_hz: 312_500.0,
            subcarriers: crate::csi_processing::DEFAULT_SUBCARRIERS,
            packets: crate::csi_processing::DEFAULT_PACKETS,
            antennas: crate::csi_processing::DEFAULT_ANTENNAS,
            tx: [-0.5, 0.0, 0.0],
            rx_center: [0.5, 0.0, 0.0],
            hand_center: [0.0, 0.0, 0.3],
            static_paths: 6,
            static_gain: (0.1, 0.5),
            noise_std: 0.01,
            reflectivity: 12.75,
            palm_area: 0.008,
            finger_width: 0.016,
            jitter: 0.01,
            hand_enabled: true,
        }
    }
}

/// Longest finger segment the sampler can produce, metres.
const MAX_SEGMENT_M: f64 = 0.2 * METRES_PER_UNIT;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathKind {
    LineOfSight,
    Static,
    Palm,
    Finger(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSpec {
    pub kind: PathKind,
    /// Total propagation distance, metres.
    pub length: f64,
    pub gain: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0 && self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::Config("frequencies must be positive".into()));
        }
        let lowest = self.carrier_hz - (self.subcarriers as f64 - 1.0) / 2.0 * self.subcarrier_spacing_hz;
        if !(lowest > 0.0) {
            return Err(Error::Config("band extends below zero frequency".into()));
        }
        if self.subcarriers == 0 || self.packets == 0 || self.antennas == 0 {
            return Err(Error::Config("CSI dimensions must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be >= 0".into()));
        }
        if !(self.palm_area > self.finger_width * MAX_SEGMENT_M) {
            return Err(Error::Config("palm must out-reflect every finger segment".into()));
        }
        if !(self.static_gain.0 >= 0.0 && self.static_gain.0 <= self.static_gain.1) {
            return Err(Error::Config("static gain range is invalid".into()));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn subcarrier_hz(&self, k: usize) -> f64 {
        self.carrier_hz + (k as f64 - (self.subcarriers as f64 - 1.0) / 2.0) * self.subcarrier_spacing_hz
    }

    pub fn rx_antenna(&self, a: usize) -> Vec3<f64> {
        let off = (a as f64 - (self.antennas as f64 - 1.0) / 2.0) * self.wavelength() / 2.0;
        geom::add(self.rx_center, [0.0, off, 0.0])
    }

    pub fn to_metres(&self, p: Vec3<f64>, domain: &DomainSpec) -> Vec3<f64> {
        let local = geom::scale(geom::sub(p, [0.5; 3]), METRES_PER_UNIT);
        geom::add(geom::add(local, self.hand_center), domain.offset)
    }

    /// Complex response of one path on subcarrier `k`.
    pub fn path_response(&self, path: &PathSpec, k: usize) -> Complex<f64> {
        let phase = -std::f64::consts::TAU * path.length * self.subcarrier_hz(k) / SPEED_OF_LIGHT;
        Complex::from_polar(path.gain, phase)
    }

    fn bounce(&self, at: Vec3<f64>, antenna: usize, area: f64, kind: PathKind) -> Result<PathSpec> {
        let d1 = geom::dist(self.tx, at);
        let d2 = geom::dist(at, self.rx_antenna(antenna));
        if d1 < 1e-6 || d2 < 1e-6 {
            return Err(Error::Channel(format!("reflector {kind:?} coincides with an antenna")));
        }
        Ok(PathSpec {
            kind,
            length: d1 + d2,
            gain: self.reflectivity * area / (d1 * d2),
        })
    }

    /// Line of sight plus the domain's fixed scatterers.
    pub fn static_paths(&self, domain: &DomainSpec, antenna: usize) -> Result<Vec<PathSpec>> {
        let rx = self.rx_antenna(antenna);
        let los = geom::dist(self.tx, rx);
        let mut out = vec![PathSpec {
            kind: PathKind::LineOfSight,
            length: los,
            gain: 1.0 / los,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(domain.env_seed);
        for _ in 0..self.static_paths {
            let s = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.5..2.0)];
            let g = rng.random_range(self.static_gain.0..=self.static_gain.1);
            let (d1, d2) = (geom::dist(self.tx, s), geom::dist(s, rx));
            out.push(PathSpec {
                kind: PathKind::Static,
                length: d1 + d2,
                gain: g / (d1 * d2),
            });
        }
        Ok(out)
    }

    /// One path for the palm and one per finger segment.
    pub fn hand_paths(&self, pose: &HandPose<f64>, domain: &DomainSpec, antenna: usize) -> Result<Vec<PathSpec>> {
        let topo = SkeletonTopology::canonical();
        let j = pose.joints().map(|p| self.to_metres(p, domain));
        let mut palm = j[ROOT];
        for chain in topo.finger_groups() {
            palm = geom::add(palm, j[chain[0]]);
        }
        palm = geom::scale(palm, 1.0 / (NUM_FINGERS as f64 + 1.0));
        let mut out = Vec::with_capacity(1 + NUM_FINGER_BONES);
        out.push(self.bounce(palm, antenna, self.palm_area, PathKind::Palm)?);
        let mut k = 0;
        for chain in topo.finger_groups() {
            for s in 0..3 {
                let (a, b) = (j[chain[s]], j[chain[s + 1]]);
                let mid = geom::scale(geom::add(a, b), 0.5);
                let area = geom::dist(a, b) * self.finger_width;
                out.push(self.bounce(mid, antenna, area, PathKind::Finger(k))?);
                k += 1;
            }
        }
        Ok(out)
    }
}

/// Multipath CSI for a pose held over `packets` measurements with a small
/// vertical oscillation, plus complex Gaussian noise.
pub fn synth_csi<R: Rng>(pose: &HandPose<f64>, channel: &ChannelConfig, domain: &DomainSpec, rng: &mut R) -> Result<CsiSample<f64>> {
    channel.validate()?;
    let (nf, nt, na) = (channel.subcarriers, channel.packets, channel.antennas);
    let mut statics = vec![Complex::new(0.0, 0.0); nf * na];
    for a in 0..na {
        for path in channel.static_paths(domain, a)? {
            for f in 0..nf {
                statics[f * na + a] += channel.path_response(&path, f);
            }
        }
    }
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, channel.noise_std / std::f64::consts::SQRT_2)
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut values = vec![Complex::new(0.0, 0.0); nf * nt * na];
    for t in 0..nt {
        let dz = channel.jitter * (std::f64::consts::TAU * t as f64 / nt as f64 + phase0).sin();
        let moved = pose.translated([0.0, 0.0, dz]);
        for a in 0..na {
            let paths = if channel.hand_enabled {
                channel.hand_paths(&moved, domain, a)?
            } else {
                Vec::new()
            };
            for f in 0..nf {
                let mut h = statics[f * na + a];
                for p in &paths {
                    h += channel.path_response(p, f);
                }
                values[(f * nt + t) * na + a] = h;
            }
        }
    }
    if channel.noise_std > 0.0 {
        for v in values.iter_mut() {
            *v += Complex::new(noise.sample(rng), noise.sample(rng));
        }
    }
    CsiSample::new(nf, nt, na, values)
}

/// One simulated measurement with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub csi: CsiSample<f32>,
    pub mask: HandMask,
    pub pose: HandPose<f32>,
    pub domain: u32,
    pub gesture: Option<u32>,
    pub cm_per_unit: f64,
}

/// Everything `generate_dataset` needs besides counts and seed.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SimConfig {
    pub channel: ChannelConfig,
    pub projection: Projection,
    pub model: HandModel,
}

impl SimConfig {
    /// `channel.*`, `projection.*` and optional `model.*` keys. A
    /// `projection.side` without `projection.pixels_per_unit` keeps the
    /// default field of view.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut sim = Self::default();
        let ch = kv.section("channel");
        let c = &mut sim.channel;
        macro_rules! field {
            ($kv:expr, $key:literal, $f:expr) => {
                if let Some(v) = $kv.parse_opt($key)? {
                    $f = v;
                }
            };
        }
        macro_rules! vec3 {
            ($kv:expr, $key:literal, $f:expr) => {
                if let Some(v) = $kv.list_opt::<f64>($key)? {
                    $f = <[f64; 3]>::try_from(v.as_slice())
                        .map_err(|_| Error::Config(format!("`{}` needs three values", $key)))?;
                }
            };
        }
        field!(ch, "carrier_hz", c.carrier_hz);
        field!(ch, "subcarrier_spacing_hz", c.subcarrier_spacing_hz);
        field!(ch, "subcarriers", c.subcarriers);
        field!(ch, "packets", c.packets);
        field!(ch, "antennas", c.antennas);
        vec3!(ch, "tx", c.tx);
        vec3!(ch, "rx_center", c.rx_center);
        vec3!(ch, "hand_center", c.hand_center);
        field!(ch, "static_paths", c.static_paths);
        if let Some(v) = ch.list_opt::<f64>("static_gain")? {
            match v[..] {
                [lo, hi] => c.static_gain = (lo, hi),
                _ => return Err(Error::Config("`static_gain` needs two values".into())),
            }
        }
        field!(ch, "noise_std", c.noise_std);
        field!(ch, "reflectivity", c.reflectivity);
        field!(ch, "palm_area", c.palm_area);
        field!(ch, "finger_width", c.finger_width);
        field!(ch, "jitter", c.jitter);
        field!(ch, "hand_enabled", c.hand_enabled);
        c.validate()?;

        let pr = kv.section("projection");
        if let Some(side) = pr.parse_opt("side")? {
            sim.projection = Projection::with_side(side);
        }
        field!(pr, "pixels_per_unit", sim.projection.pixels_per_unit);
        if let Some(v) = pr.list_opt::<f64>("center")? {
            match v[..] {
                [x, y] => sim.projection.center = [x, y],
                _ => return Err(Error::Config("`center` needs two values".into())),
            }
        }
        if sim.projection.side == 0 || !(sim.projection.pixels_per_unit > 0.0) {
            return Err(Error::Config("projection needs a positive side and scale".into()));
        }
        let model = kv.section("model");
        if model.keys().next().is_some() {
            sim.model = HandModel::from_kv(&model)?;
        }
        Ok(sim)
    }

    pub fn to_kv(&self) -> KvConfig {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        let c = &self.channel;
        let mut kv = KvConfig::new();
        kv.set("channel.carrier_hz", c.carrier_hz);
        kv.set("channel.subcarrier_spacing_hz", c.subcarrier_spacing_hz);
        kv.set("channel.subcarriers", c.subcarriers);
        kv.set("channel.packets", c.packets);
        kv.set("channel.antennas", c.antennas);
        kv.set("channel.tx", join(&c.tx));
        kv.set("channel.rx_center", join(&c.rx_center));
        kv.set("channel.hand_center", join(&c.hand_center));
        kv.set("channel.static_paths", c.static_paths);
        kv.set("channel.static_gain", join(&[c.static_gain.0, c.static_gain.1]));
        kv.set("channel.noise_std", c.noise_std);
        kv.set("channel.reflectivity", c.reflectivity);
        kv.set("channel.palm_area", c.palm_area);
        kv.set("channel.finger_width", c.finger_width);
        kv.set("channel.jitter", c.jitter);
        kv.set("channel.hand_enabled", c.hand_enabled);
        kv.set("projection.side", self.projection.side);
        kv.set("projection.pixels_per_unit", self.projection.pixels_per_unit);
        kv.set("projection.center", join(&self.projection.center));
        kv.merge_prefixed("model", &self.model.to_kv());
        kv
    }
}

/// Samples, renders and measures one pose; out-of-frame draws are retried.
pub fn simulate_sample<R: Rng>(
    rng: &mut R,
    sim: &SimConfig,
    domain: &DomainSpec,
    template: Option<&GestureTemplate>,
) -> Result<LabeledSample> {
    for _ in 0..SAMPLE_BUDGET {
        let (_, pose) = sample_pose_with(rng, &sim.model, template)?;
        let mask = match render_mask(&pose, &sim.projection) {
            Ok(m) => m,
            Err(Error::Render(_)) => continue,
            Err(e) => return Err(e),
        };
        return label(pose, mask, rng, sim, domain, template.map(|t| t.id));
    }
    Err(Error::Generation("no pose fits the frame".into()))
}

fn label<R: Rng>(pose: HandPose<f64>, mask: HandMask, rng: &mut R, sim: &SimConfig, domain: &DomainSpec, gesture: Option<u32>) -> Result<LabeledSample> {
    let csi = synth_csi(&pose, &sim.channel, domain, rng)?;
    Ok(LabeledSample {
        csi: csi.cast(),
        mask,
        pose: pose.cast(),
        domain: domain.id,
        gesture,
        cm_per_unit: CM_PER_UNIT,
    })
}

/// Per-sample generator: stream `index` of the run seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` samples cycling through domains fastest, then gesture classes.
pub fn generate_samples(n: usize, domains: &[DomainSpec], gestures: GestureSet, seed: u64, sim: &SimConfig) -> Result<Vec<LabeledSample>> {
    if n == 0 || domains.is_empty() {
        return Err(Error::Argument("need at least one sample and one domain".into()));
    }
    let templates = gestures.templates();
    (0..n)
        .map(|i| {
            let domain = &domains[i % domains.len()];
            let template = (!templates.is_empty()).then(|| &templates[(i / domains.len()) % templates.len()]);
            simulate_sample(&mut sample_rng(seed, i as u64), sim, domain, template)
        })
        .collect()
}

/// Header for samples produced under `sim`.
pub fn dataset_meta(sim: &SimConfig, domains: &[DomainSpec], gestures: GestureSet) -> DatasetMeta {
    DatasetMeta {
        subcarriers: sim.channel.subcarriers,
        packets: sim.channel.packets,
        antennas: sim.channel.antennas,
        mask_side: sim.projection.side,
        cm_per_unit: CM_PER_UNIT,
        domains: domains.to_vec(),
        gestures: gestures
            .templates()
            .into_iter()
            .map(|t| GestureEntry { id: t.id, name: t.name })
            .collect(),
    }
}

/// Balanced dataset; see [`generate_samples`].
pub fn generate_dataset(n: usize, domains: &[DomainSpec], gestures: GestureSet, seed: u64, sim: &SimConfig) -> Result<Dataset> {
    let samples = generate_samples(n, domains, gestures, seed, sim)?;
    Dataset::new(dataset_meta(sim, domains, gestures), samples)
}

/// A closed or open stroke drawn by the fingertip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackTemplate {
    Triangle,
    Z,
    D,
}

impl std::str::FromStr for TrackTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangle" => Ok(Self::Triangle),
            "z" | "Z" => Ok(Self::Z),
            "d" | "D" => Ok(Self::D),
            other => Err(Error::Config(format!("unknown track template `{other}`"))),
        }
    }
}

impl TrackTemplate {
    pub fn is_closed(self) -> bool {
        !matches!(self, TrackTemplate::Z)
    }

    /// Polyline in the unit square, first point repeated at the end when closed.
    fn polyline(self) -> Vec<[f64; 2]> {
        match self {
            TrackTemplate::Triangle => vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.0, 0.0]],
            TrackTemplate::Z => vec![[0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]],
            TrackTemplate::D => {
                let mut pts = vec![[0.0, 0.0], [0.0, 1.0]];
                for k in 1..=16 {
                    let a = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * k as f64 / 16.0;
                    pts.push([0.5 * a.cos() * 1.6, 0.5 + 0.5 * a.sin()]);
                }
                pts.last_mut().expect("non-empty")[0] = 0.0;
                pts
            }
        }
    }

    /// `steps` points evenly spaced by arc length, scaled to `size` and
    /// centred on `center` in the x-y plane at height `z`.
    pub fn path(self, steps: usize, size: f64, center: [f64; 2], z: f64) -> Vec<Vec3<f64>> {
        let poly = self.polyline();
        let (lo, hi) = poly.iter().fold(([f64::MAX; 2], [f64::MIN; 2]), |(lo, hi), p| {
            ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
        });
        let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let seg_len: Vec<f64> = poly.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).collect();
        let total: f64 = seg_len.iter().sum();
        // Closed strokes stop one step short so loops chain without repeats.
        let denom = if self.is_closed() { steps as f64 } else { (steps.max(2) - 1) as f64 };
        (0..steps)
            .map(|i| {
                let mut s = total * i as f64 / denom;
                let mut k = 0;
                while k + 1 < seg_len.len() && s > seg_len[k] {
                    s -= seg_len[k];
                    k += 1;
                }
                let t = if seg_len[k] > 0.0 { (s / seg_len[k]).min(1.0) } else { 0.0 };
                let (a, b) = (poly[k], poly[k + 1]);
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                [center[0] + (p[0] - mid[0]) * size, center[1] + (p[1] - mid[1]) * size, z]
            })
            .collect()
    }

    /// Diagonal of the scaled template's bounding box.
    pub fn diagonal(self, size: f64) -> f64 {
        let p = self.path(64, size, [0.0, 0.0], 0.0);
        let (lo, hi) = p.iter().fold(([f64::MAX; 2], [f64::MIN; 2]), |(lo, hi), q| {
            ([lo[0].min(q[0]), lo[1].min(q[1])], [hi[0].max(q[0]), hi[1].max(q[1])])
        });
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt()
    }
}

/// Index-finger pointing posture used for tracking.
pub fn pointing_pose(model: &HandModel) -> Result<HandPose<f64>> {
    let pose = PoseParams::nominal([1.0, 0.0, 1.0, 1.0, 1.0], 0.3).build(&model.topology)?;
    if !satisfies_constraints(&pose, model) {
        return Err(Error::Generation("pointing posture violates the constraint tables".into()));
    }
    Ok(pose)
}

/// Translates `base` so its fingertip joint lands on `target`.
pub fn place_fingertip(base: &HandPose<f64>, target: Vec3<f64>) -> HandPose<f64> {
    base.translated(geom::sub(target, base.joint(crate::hand_model::FINGERTIP)))
}

/// Measurements of `base` carried along `points` by its fingertip.
pub fn tracking_samples(base: &HandPose<f64>, points: &[Vec3<f64>], domain: &DomainSpec, seed: u64, sim: &SimConfig) -> Result<Vec<LabeledSample>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let pose = place_fingertip(base, p);
            let mask = render_mask(&pose, &sim.projection)?;
            label(pose, mask, &mut sample_rng(seed, i as u64), sim, domain, None)
        })
        .collect()
}

/// Template size, pose units, used when none is given.
pub const DEFAULT_TRACK_SIZE: f64 = 0.2;

/// A pointing hand tracing `template` `loops` times with `steps` frames per
/// loop, centred on the fingertip of the nominal pointing pose. Returns the
/// stream and the true fingertip at every frame.
pub fn tracking_dataset(
    template: TrackTemplate,
    loops: usize,
    steps: usize,
    size: f64,
    domain: &DomainSpec,
    seed: u64,
    sim: &SimConfig,
) -> Result<(Dataset, Vec<Vec3<f64>>)> {
    if loops == 0 || steps < 2 || !(size > 0.0) {
        return Err(Error::Argument("tracking needs loops >= 1, steps >= 2 and a positive size".into()));
    }
    let base = pointing_pose(&sim.model)?;
    let tip = base.joint(crate::hand_model::FINGERTIP);
    let one = template.path(steps, size, [tip[0], tip[1]], tip[2]);
    let points: Vec<Vec3<f64>> = (0..loops).flat_map(|_| one.iter().copied()).collect();
    let samples = tracking_samples(&base, &points, domain, seed, sim)?;
    let mut meta = dataset_meta(sim, std::slice::from_ref(domain), GestureSet::Free);
    meta.gestures.clear();
    Ok((Dataset::new(meta, samples)?, points))
}

/// The pointing pose with its fingertip drawn uniformly from a square of
/// half-width `half_width` around the nominal fingertip, in the fingertip's
/// z plane. Domains cycle as in [`generate_samples`].
pub fn pointing_dataset(n: usize, half_width: f64, domains: &[DomainSpec], seed: u64, sim: &SimConfig) -> Result<Dataset> {
    if n == 0 || domains.is_empty() || !(half_width >= 0.0) {
        return Err(Error::Argument("need samples, domains and a non-negative half-width".into()));
    }
    let base = pointing_pose(&sim.model)?;
    let tip = base.joint(crate::hand_model::FINGERTIP);
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let target = [
                tip[0] + rng.random_range(-half_width..=half_width),
                tip[1] + rng.random_range(-half_width..=half_width),
                tip[2],
            ];
            let pose = place_fingertip(&base, target);
            let mask = render_mask(&pose, &sim.projection)?;
            label(pose, mask, &mut rng, sim, &domains[i % domains.len()], None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = dataset_meta(sim, domains, GestureSet::Free);
    meta.gestures.clear();
    Dataset::new(meta, samples)
}
