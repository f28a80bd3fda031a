//! Downstream uses of a trained backbone: gesture classification with a
//! linear head, and index-fingertip tracking.

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::csi_processing::CsiSample;
use crate::dataset_io::{Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::hand_model::FINGERTIP;
use crate::kv::KvConfig;
use crate::network::HandNet;
use crate::nn::{sigmoid, Param};
use crate::synth_sim::TrackTemplate;

const INFER_BATCH: usize = 32;
/// Side of the grid the mask probabilities are averaged onto for the head.
pub const MASK_POOL_GRID: usize = 8;

/// Which backbone output feeds the gesture head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadInput {
    #[default]
    Latent,
    Pose,
    MaskPooled,
}

impl std::str::FromStr for HeadInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "pose" => Ok(Self::Pose),
            "mask-pooled" => Ok(Self::MaskPooled),
            other => Err(Error::Config(format!("unknown head input `{other}`"))),
        }
    }
}

impl std::fmt::Display for HeadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Latent => "latent",
            Self::Pose => "pose",
            Self::MaskPooled => "mask-pooled",
        })
    }
}

/// Feature width the backbone provides for `input`.
pub fn feature_dim(net: &HandNet<f32>, input: HeadInput) -> Result<usize> {
    let cfg = net.config();
    match input {
        HeadInput::Latent => Ok(cfg.latent_dim),
        HeadInput::Pose => Ok(63),
        HeadInput::MaskPooled if cfg.multi_task => Ok(MASK_POOL_GRID * MASK_POOL_GRID),
        HeadInput::MaskPooled => Err(Error::Config("mask features need a multi-task backbone".into())),
    }
}

fn pool_mask(probs: &[f32], side: usize) -> Vec<f64> {
    let g = MASK_POOL_GRID;
    let mut sum = vec![0.0; g * g];
    let mut count = vec![0usize; g * g];
    for r in 0..side {
        for c in 0..side {
            let k = (r * g / side) * g + c * g / side;
            sum[k] += probs[r * side + c] as f64;
            count[k] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect()
}

/// Head features for each sample, computed with the backbone untouched.
pub fn head_features(net: &HandNet<f32>, samples: &[&CsiSample<f32>], input: HeadInput) -> Result<Vec<Vec<f64>>> {
    feature_dim(net, input)?;
    let side = net.config().mask_side;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_BATCH) {
        let fwd = net.forward(&net.prepare_input(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(match input {
                HeadInput::Latent => fwd.latent.item(i).iter().map(|&v| v as f64).collect(),
                HeadInput::Pose => fwd.pose.item(i).iter().map(|&v| v as f64).collect(),
                HeadInput::MaskPooled => {
                    let logits = fwd.mask_logits.as_ref().expect("multi-task checked above");
                    let probs: Vec<f32> = logits.item(i).iter().map(|&v| sigmoid(v)).collect();
                    pool_mask(&probs, side)
                }
            });
        }
    }
    Ok(out)
}

/// Numerically stable softmax, computed in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One affine layer followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureHead {
    pub input: HeadInput,
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl GestureHead {
    pub fn zeros(input: HeadInput, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::Argument(format!("head needs dim > 0 and >= 2 classes, got {dim} and {classes}")));
        }
        Ok(Self {
            input,
            classes,
            dim,
            weight: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            names: (0..classes).map(|k| k.to_string()).collect(),
        })
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(Error::Shape(format!("head expects {} features, got {}", self.dim, features.len())));
        }
        Ok(self
            .weight
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(features).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    pub fn classify_features(&self, features: &[f64]) -> Result<Classification> {
        let probabilities = softmax(&self.logits(features)?);
        let class = argmax(&probabilities);
        Ok(Classification { class, probabilities })
    }

    fn check_backbone(&self, net: &HandNet<f32>) -> Result<()> {
        let d = feature_dim(net, self.input)?;
        if d != self.dim {
            return Err(Error::Shape(format!("head expects {} features, backbone gives {d}", self.dim)));
        }
        Ok(())
    }

    /// Stored as a checkpoint with `kind = gesture_head`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = KvConfig::new();
        header.set("kind", "gesture_head");
        header.set("head.input", self.input);
        header.set("head.classes", self.classes);
        header.set("head.dim", self.dim);
        header.set("head.names", self.names.join(","));
        let tensor = |name: &str, shape: Vec<usize>, v: &[f64]| Param {
            name: name.into(),
            shape,
            value: v.iter().map(|&x| x as f32).collect(),
        };
        Checkpoint {
            header,
            tensors: vec![
                tensor("head.weight", vec![self.classes, self.dim], &self.weight),
                tensor("head.bias", vec![self.classes], &self.bias),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind") != Some("gesture_head") {
            return Err(Error::Load("checkpoint does not hold a gesture head".into()));
        }
        let input = ck.header.parse_req("head.input")?;
        let classes: usize = ck.header.parse_req("head.classes")?;
        let dim: usize = ck.header.parse_req("head.dim")?;
        let mut head = Self::zeros(input, dim, classes)?;
        let names: Vec<String> = ck.header.get("head.names").unwrap_or("").split(',').map(str::to_string).collect();
        if names.len() == classes {
            head.names = names;
        }
        for (name, dst) in [("head.weight", &mut head.weight), ("head.bias", &mut head.bias)] {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::Load(format!("gesture head lacks `{name}`")))?;
            if t.value.len() != dst.len() {
                return Err(Error::Load(format!("`{name}` has {} values, expected {}", t.value.len(), dst.len())));
            }
            for (d, &v) in dst.iter_mut().zip(&t.value) {
                *d = v as f64;
            }
        }
        Ok(head)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Argmax class and probabilities for one sample.
pub fn classify_gesture(sample: &CsiSample<f32>, net: &HandNet<f32>, head: &GestureHead) -> Result<Classification> {
    head.check_backbone(net)?;
    let f = head_features(net, &[sample], head.input)?;
    head.classify_features(&f[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub input: HeadInput,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            input: HeadInput::Latent,
            epochs: 200,
            lr: 0.01,
            l2: 1e-4,
            seed: 0,
            batch_size: 32,
        }
    }
}

/// Fits a head on fixed features with softmax cross-entropy.
///
/// Features are standardized during fitting and the scaling is folded back
/// into the affine map, so the result is still a single layer. Weights are
/// rounded to f32 so a saved head reproduces the fitted one exactly.
pub fn fit_head(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &HeadConfig) -> Result<GestureHead> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Argument("head training needs one label per feature row".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {bad} outside {classes} classes")));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(Error::Config("invalid head training settings".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| {
            let v = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(mean.iter().zip(&sd)).map(|(x, (m, s))| (x - m) / s).collect())
        .collect();

    let mut head = GestureHead::zeros(cfg.input, dim, classes)?;
    let np = head.weight.len() + head.bias.len();
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0; np];
            for &i in batch {
                let p = softmax(&head.logits(&z[i])?);
                for k in 0..classes {
                    let d = (p[k] - f64::from(u8::from(k == labels[i]))) / batch.len() as f64;
                    for j in 0..dim {
                        g[k * dim + j] += d * z[i][j];
                    }
                    g[classes * dim + k] += d;
                }
            }
            for (gk, w) in g.iter_mut().zip(&head.weight) {
                *gk += cfg.l2 * w;
            }
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for (idx, gk) in g.iter().enumerate() {
                m1[idx] = b1 * m1[idx] + (1.0 - b1) * gk;
                m2[idx] = b2 * m2[idx] + (1.0 - b2) * gk * gk;
                let delta = cfg.lr * (m1[idx] / c1) / ((m2[idx] / c2).sqrt() + eps);
                if idx < head.weight.len() {
                    head.weight[idx] -= delta;
                } else {
                    head.bias[idx - head.weight.len()] -= delta;
                }
            }
        }
    }
    for k in 0..classes {
        let row = &mut head.weight[k * dim..(k + 1) * dim];
        let mut shift = 0.0;
        for j in 0..dim {
            row[j] /= sd[j];
            shift += row[j] * mean[j];
        }
        head.bias[k] -= shift;
    }
    for v in head.weight.iter_mut().chain(head.bias.iter_mut()) {
        *v = *v as f32 as f64;
    }
    Ok(head)
}

/// Trains a head on the labeled samples at `indices`; the backbone is only read.
pub fn train_head(net: &HandNet<f32>, data: &Dataset, indices: &[usize], cfg: &HeadConfig) -> Result<GestureHead> {
    let classes = data.meta.gestures.iter().map(|g| g.id as usize + 1).max().unwrap_or(0);
    let mut labels = Vec::with_capacity(indices.len());
    let mut samples = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::Argument(format!("sample index {i} out of range")))?;
        let g = s.gesture.ok_or_else(|| Error::Argument(format!("sample {i} has no gesture label")))?;
        labels.push(g as usize);
        samples.push(&s.csi);
    }
    let features = head_features(net, &samples, cfg.input)?;
    let mut head = fit_head(&features, &labels, classes, cfg)?;
    for g in &data.meta.gestures {
        head.names[g.id as usize] = g.name.clone();
    }
    Ok(head)
}

/// Fraction of `indices` whose predicted class matches the gesture label.
pub fn head_accuracy(net: &HandNet<f32>, head: &GestureHead, data: &Dataset, indices: &[usize]) -> Result<f64> {
    head.check_backbone(net)?;
    if indices.is_empty() {
        return Err(Error::Argument("accuracy over no samples".into()));
    }
    let samples: Vec<&CsiSample<f32>> = indices.iter().map(|&i| &data.samples[i].csi).collect();
    let features = head_features(net, &samples, head.input)?;
    let mut hits = 0;
    for (f, &i) in features.iter().zip(indices) {
        let label = data.samples[i]
            .gesture
            .ok_or_else(|| Error::Argument(format!("sample {i} has no gesture label")))?;
        hits += usize::from(head.classify_features(f)?.class == label as usize);
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Order-sensitive hash of every parameter and buffer value.
pub fn weight_hash(net: &HandNet<f32>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for p in net.params().params().iter().chain(net.buffers().params()) {
        p.name.hash(&mut h);
        p.shape.hash(&mut h);
        for v in &p.value {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Index-fingertip positions over time.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerTrack {
    times: Vec<f64>,
    points: Vec<Vec3<f64>>,
    /// Moving-average window applied; 1 means none.
    pub window: usize,
}

impl FingerTrack {
    pub fn new(times: Vec<f64>, points: Vec<Vec3<f64>>, window: usize) -> Result<Self> {
        if times.len() != points.len() || times.is_empty() {
            return Err(Error::Argument("track needs one time per point and at least one point".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("track times must increase strictly".into()));
        }
        if window == 0 {
            return Err(Error::Argument("smoothing window must be positive".into()));
        }
        Ok(Self { times, points, window })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[Vec3<f64>] {
        &self.points
    }

    /// `# window=w` then one `t x y z` line per point.
    pub fn to_text(&self) -> String {
        let mut out = format!("# window={}\n", self.window);
        for (t, p) in self.times.iter().zip(&self.points) {
            let _ = writeln!(out, "{t} {} {} {}", p[0], p[1], p[2]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut window = 1;
        let (mut times, mut points) = (Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(w) = rest.trim().strip_prefix("window=") {
                    window = w
                        .parse()
                        .map_err(|_| Error::Argument(format!("line {}: bad window `{w}`", n + 1)))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Argument(format!("line {}: expected four numbers", n + 1)))?;
            if v.len() != 4 {
                return Err(Error::Argument(format!("line {}: expected four numbers", n + 1)));
            }
            times.push(v[0]);
            points.push([v[1], v[2], v[3]]);
        }
        Self::new(times, points, window)
    }
}

/// Centered moving average; the window shrinks at the ends.
pub fn moving_average(points: &[Vec3<f64>], window: usize) -> Vec<Vec3<f64>> {
    let (before, after) = ((window.max(1) - 1) / 2, window.max(1) / 2);
    (0..points.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(points.len());
            let mut acc = [0.0; 3];
            for p in &points[lo..hi] {
                acc = geom::add(acc, *p);
            }
            geom::scale(acc, 1.0 / (hi - lo) as f64)
        })
        .collect()
}

/// Per-frame fingertip inference; `times` defaults to 0, 1, 2, ...
pub fn track_finger(
    samples: &[&CsiSample<f32>],
    net: &HandNet<f32>,
    times: Option<&[f64]>,
    window: usize,
) -> Result<FingerTrack> {
    if samples.is_empty() {
        return Err(Error::Argument("empty sample stream".into()));
    }
    let mut raw = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_BATCH) {
        let fwd = net.forward(&net.prepare_input(chunk)?)?;
        for i in 0..chunk.len() {
            let p = fwd.pose_at(i)?.joint(FINGERTIP);
            raw.push([p[0] as f64, p[1] as f64, p[2] as f64]);
        }
    }
    let times = match times {
        Some(t) => t.to_vec(),
        None => (0..samples.len()).map(|i| i as f64).collect(),
    };
    let points = if window > 1 { moving_average(&raw, window) } else { raw };
    FingerTrack::new(times, points, window)
}

/// Start-point error per loop and its least-squares trend.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub start_errors: Vec<f64>,
    /// Error change per loop.
    pub slope: f64,
    pub slope_se: f64,
}

/// Least-squares slope of `y` against 0, 1, 2, ... and its standard error.
pub fn trend(y: &[f64]) -> Result<(f64, f64)> {
    let n = y.len();
    if n < 3 {
        return Err(Error::Argument(format!("trend needs at least 3 points, got {n}")));
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = (0..n).map(|i| (i as f64 - xm).powi(2)).sum();
    let slope = y.iter().enumerate().map(|(i, v)| (i as f64 - xm) * (v - ym)).sum::<f64>() / sxx;
    let icept = ym - slope * xm;
    let sse: f64 = y.iter().enumerate().map(|(i, v)| (v - icept - slope * i as f64).powi(2)).sum();
    Ok((slope, (sse / (n - 2) as f64 / sxx).sqrt()))
}

/// Compares a tracked closed template, traced `loops` times with
/// `steps_per_loop` frames each, against the truth at every loop start.
pub fn no_drift_check(
    track: &[Vec3<f64>],
    truth: &[Vec3<f64>],
    template: TrackTemplate,
    steps_per_loop: usize,
) -> Result<DriftReport> {
    if !template.is_closed() {
        return Err(Error::Argument(format!("template {template:?} is open; drift needs closed loops")));
    }
    if track.len() != truth.len() || steps_per_loop == 0 {
        return Err(Error::Shape("track and truth must match and loops must be non-empty".into()));
    }
    let loops = track.len() / steps_per_loop;
    if loops < 3 {
        return Err(Error::Argument(format!("drift needs at least 3 loops, got {loops}")));
    }
    let start_errors: Vec<f64> = (0..loops)
        .map(|k| geom::dist(track[k * steps_per_loop], truth[k * steps_per_loop]))
        .collect();
    let (slope, slope_se) = trend(&start_errors)?;
    Ok(DriftReport {
        start_errors,
        slope,
        slope_se,
    })
}

/// One-sample two-sided t-test of zero mean: returns (t, p).
pub fn t_test_zero_mean(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Argument("t-test needs at least 2 values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(mean), 0.0) });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Argument(e.to_string()))?;
    Ok((t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Random partition of `0..n` into disjoint (train, held-out) index lists.
pub fn holdout(n: usize, held: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * held).round() as usize;
    let test = idx.split_off(n - k.min(n));
    (idx, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::nn::Tensor;
    use rand::Rng;

    fn tiny_net(multi_task: bool) -> HandNet<f32> {
        let cfg = NetworkConfig {
            subcarriers: 12,
            packets: 4,
            antennas: 3,
            mask_side: 16,
            multi_task,
            ..NetworkConfig::reduced()
        };
        HandNet::new(&cfg, 3).unwrap()
    }

    fn random_csi(rng: &mut ChaCha8Rng) -> CsiSample<f32> {
        let v = (0..12 * 4 * 3)
            .map(|_| num_complex::Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        CsiSample::new(12, 4, 3, v).unwrap()
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let z: Vec<f64> = (0..9).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = softmax(&z);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let c = rng.random_range(-500.0..500.0);
            let q = softmax(&z.iter().map(|v| v + c).collect::<Vec<_>>());
            assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_head_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[3.0, 0.0], [0.0, 3.0], [-3.0, -3.0]];
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..90 {
            let c = centers[i % 3];
            f.push(vec![c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0), 7.0]);
            y.push(i % 3);
        }
        let head = fit_head(&f, &y, 3, &HeadConfig { epochs: 50, ..HeadConfig::default() }).unwrap();
        let hits = f
            .iter()
            .zip(&y)
            .filter(|(x, &l)| head.classify_features(x).unwrap().class == l)
            .count();
        assert_eq!(hits, 90);
        assert!(fit_head(&f, &y, 2, &HeadConfig::default()).is_err());
    }

    #[test]
    fn head_checkpoint_round_trip_and_mismatch() {
        let net = tiny_net(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = GestureHead::zeros(HeadInput::Latent, net.config().latent_dim, 4).unwrap();
        for w in head.weight.iter_mut() {
            *w = rng.random_range(-1.0f32..1.0) as f64;
        }
        let back = GestureHead::from_checkpoint(&Checkpoint::from_bytes(&head.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, head);
        let csi = random_csi(&mut rng);
        let c = classify_gesture(&csi, &net, &head).unwrap();
        assert!((c.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let wrong = GestureHead::zeros(HeadInput::Latent, 7, 4).unwrap();
        assert!(matches!(classify_gesture(&csi, &net, &wrong), Err(Error::Shape(_))));
        let masked = GestureHead::zeros(HeadInput::MaskPooled, 64, 4).unwrap();
        assert!(matches!(classify_gesture(&csi, &tiny_net(false), &masked), Err(Error::Config(_))));
        assert!(classify_gesture(&csi, &net, &masked).is_ok());
    }

    #[test]
    fn tracking_is_per_frame() {
        let net = tiny_net(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<CsiSample<f32>> = (0..7).map(|_| random_csi(&mut rng)).collect();
        let refs: Vec<&CsiSample<f32>> = frames.iter().collect();
        let t = track_finger(&refs, &net, None, 1).unwrap();
        assert_eq!(t.len(), 7);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let shuffled: Vec<&CsiSample<f32>> = perm.iter().map(|&i| &frames[i]).collect();
        let u = track_finger(&shuffled, &net, None, 1).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(u.points()[k], t.points()[i]);
        }
        let same = vec![refs[0]; 5];
        let c = track_finger(&same, &net, None, 3).unwrap();
        assert!(c.points().iter().all(|p| geom::dist(*p, c.points()[0]) < 1e-12));
        assert!(track_finger(&[], &net, None, 3).is_err());
        let bad = Tensor::<f32>::zeros(1, 1, 1, 1);
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn track_text_round_trip() {
        let t = FingerTrack::new(vec![0.0, 0.5, 1.25], vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]], 3).unwrap();
        assert_eq!(FingerTrack::from_text(&t.to_text()).unwrap(), t);
        assert!(FingerTrack::new(vec![0.0, 0.0], vec![[0.0; 3]; 2], 1).is_err());
        assert!(FingerTrack::from_text("0 1 2\n").is_err());
    }

    #[test]
    fn moving_average_examples() {
        let p: Vec<Vec3<f64>> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let s = moving_average(&p, 3);
        assert_eq!(s[0][0], 0.5);
        assert_eq!(s[2][0], 2.0);
        assert_eq!(s[4][0], 3.5);
        assert_eq!(moving_average(&p, 1), p);
    }

    #[test]
    fn drift_examples() {
        let truth = TrackTemplate::Triangle.path(10, 0.2, [0.5, 0.5], 0.5);
        let loops: Vec<Vec3<f64>> = (0..5).flat_map(|_| truth.clone()).collect();
        let r = no_drift_check(&loops, &loops, TrackTemplate::Triangle, 10).unwrap();
        assert_eq!(r.slope, 0.0);
        let eps = 0.003;
        let drifted: Vec<Vec3<f64>> = loops
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + eps * (i / 10) as f64, p[1], p[2]])
            .collect();
        let r = no_drift_check(&drifted, &loops, TrackTemplate::Triangle, 10).unwrap();
        assert!((r.slope - eps).abs() < 1e-12);
        assert!(matches!(no_drift_check(&loops, &loops, TrackTemplate::Z, 10), Err(Error::Argument(_))));
        assert!(no_drift_check(&loops[..20], &loops[..20], TrackTemplate::D, 10).is_err());
    }

    #[test]
    fn t_test_examples() {
        // Reference p computed independently with scipy.stats.ttest_1samp.
        let (t, p) = t_test_zero_mean(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t - 2.5 / (1.6666666666666667f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!((p - 0.030466).abs() < 1e-5);
        let (_, p) = t_test_zero_mean(&[-1.0, 1.0, -0.5, 0.5]).unwrap();
        assert_eq!(p, 1.0);
        assert!(t_test_zero_mean(&[1.0]).is_err());
    }

    #[test]
    fn holdout_is_a_partition() {
        let (a, b) = holdout(20, 0.25, 3);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }
}
