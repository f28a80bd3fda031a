//! Training and evaluation driver.
//!
//! Training is single-threaded and fully determined by the config seed:
//! the split, the batch order and the initial weights all derive from it.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset_io::{Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::hand_model::{HandModel, HandPose};
use crate::kv::KvConfig;
use crate::losses::{batch_objective, coral_loss_grad, LossTerms, LossWeights, MaskLossKind, Objective};
use crate::mask::HandMask;
use crate::metrics::{iou, mean_pixel_accuracy, mpjpe, pck, MaskEval, MetricReport, PckConfig};
use crate::network::{HandNet, NetworkConfig};
use crate::nn::{sigmoid, Grads, ParamStore, Tensor};

/// Baseline lattice: each step adds one ingredient to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Pose decoder only, no embedding, joint loss only.
    A,
    /// A plus the embedding layer.
    D,
    /// D plus the mask decoder trained with squared error.
    E,
    /// E with binary cross-entropy.
    F,
    /// F with the focal mask loss.
    G,
    /// G plus the bone-length and palmar constraints.
    H,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "D" | "d" => Ok(Self::D),
            "E" | "e" => Ok(Self::E),
            "F" | "f" => Ok(Self::F),
            "G" | "g" => Ok(Self::G),
            "H" | "h" => Ok(Self::H),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl Ablation {
    /// Overrides the switches this ablation defines; everything else is kept.
    pub fn apply(self, net: &mut NetworkConfig, obj: &mut Objective) {
        net.embedding_enabled = self != Ablation::A;
        net.multi_task = !matches!(self, Ablation::A | Ablation::D);
        let w = &mut obj.weights;
        if !net.multi_task {
            w.alpha = 0.0;
        }
        if self != Ablation::H {
            w.gamma_pose = 0.0;
            w.lambda = 0.0;
        }
        match self {
            Ablation::E => obj.mask_kind = MaskLossKind::Mse,
            Ablation::F => obj.mask_kind = MaskLossKind::Bce,
            Ablation::G | Ablation::H => obj.mask_kind = MaskLossKind::Focal,
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Floor of the cosine schedule, reached on the last step.
    pub lr_min: f64,
    pub seed: u64,
    /// Fraction of samples used for training; the rest validate.
    pub split: f64,
    pub clip_norm: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub network: NetworkConfig,
    pub objective: Objective,
    pub ablation: Option<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 24,
            lr: 1e-3,
            lr_min: 0.0,
            seed: 0,
            split: 0.9,
            clip_norm: 5.0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            network: NetworkConfig::reduced(),
            objective: Objective::default(),
            ablation: None,
        }
    }
}

impl TrainConfig {
    /// Network and objective after the ablation overrides.
    pub fn resolved(&self) -> (NetworkConfig, Objective) {
        let (mut net, mut obj) = (self.network.clone(), self.objective.clone());
        if let Some(a) = self.ablation {
            a.apply(&mut net, &mut obj);
        }
        (net, obj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split {} must lie in (0, 1)", self.split)));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        let (net, obj) = self.resolved();
        net.validate()?;
        obj.weights.validate()?;
        if obj.weights.zeta > 0.0 && self.batch_size < 4 {
            return Err(Error::Config("CORAL needs batch size >= 4".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("lr_min", self.lr_min);
        kv.set("seed", self.seed);
        kv.set("split", self.split);
        kv.set("clip_norm", self.clip_norm);
        kv.set("adam_beta1", self.adam_betas.0);
        kv.set("adam_beta2", self.adam_betas.1);
        kv.set("adam_eps", self.adam_eps);
        kv.set("ablation", self.ablation.map_or("none".to_string(), |a| a.to_string()));
        kv.set("mask_loss", self.objective.mask_kind);
        kv.set("joint_loss", self.objective.joint_kind);
        kv.merge_prefixed("network", &self.network.to_kv());
        kv.merge_prefixed("loss", &self.objective.weights.to_kv());
        kv
    }

    /// Missing keys keep their defaults; the network section starts from
    /// the reduced preset unless `network.preset` says otherwise.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! field {
            ($key:literal, $f:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $f = v;
                }
            };
        }
        field!("epochs", c.epochs);
        field!("batch_size", c.batch_size);
        field!("lr", c.lr);
        field!("lr_min", c.lr_min);
        field!("seed", c.seed);
        field!("split", c.split);
        field!("clip_norm", c.clip_norm);
        field!("adam_beta1", c.adam_betas.0);
        field!("adam_beta2", c.adam_betas.1);
        field!("adam_eps", c.adam_eps);
        field!("mask_loss", c.objective.mask_kind);
        field!("joint_loss", c.objective.joint_kind);
        c.ablation = match kv.get("ablation") {
            None | Some("none") => None,
            Some(s) => Some(s.parse()?),
        };
        let mut net = kv.section("network");
        if net.get("preset").is_none() {
            net.set("preset", "reduced");
        }
        c.network = NetworkConfig::from_kv(&net)?;
        c.objective.weights = LossWeights::from_kv(&kv.section("loss"))?;
        let model = kv.section("model");
        if model.keys().next().is_some() {
            c.objective.model = HandModel::from_kv(&model)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Ordered domain ids; consecutive batches come from consecutive entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSchedule {
    order: Vec<u32>,
}

impl DomainSchedule {
    pub fn new(order: Vec<u32>) -> Result<Self> {
        if order.is_empty() {
            return Err(Error::Config("domain schedule is empty".into()));
        }
        for (i, d) in order.iter().enumerate() {
            if order[..i].contains(d) {
                return Err(Error::Config(format!("domain {d} listed twice")));
            }
        }
        Ok(Self { order })
    }

    /// Every domain present in `data`, ascending.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut ids: Vec<u32> = data.samples.iter().map(|s| s.domain).collect();
        ids.sort_unstable();
        ids.dedup();
        Self::new(ids)
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    betas: (f64, f64),
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, betas: (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            betas,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (slot, p) in params.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[slot], &mut self.v[slot], &grads.slots[slot]);
            for i in 0..p.value.len() {
                m[i] = b1f * m[i] + (1.0 - b1f) * g[i];
                v[i] = b2f * v[i] + (1.0 - b2f) * g[i] * g[i];
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Single-cycle cosine annealing from `lr` to `lr_min` over `total` steps.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales `grads` to global norm `max` if it is larger; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Grads<f32>, max: f64) -> f64 {
    let norm = grads.global_norm() as f64;
    if norm > max {
        grads.scale((max / norm) as f32);
    }
    norm
}

/// Seeded train/validation partition of sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// Shuffles `indices` and keeps `round(ratio * n)` (at least one) for training.
    pub fn new(indices: &[usize], ratio: f64, seed: u64) -> Self {
        let mut idx = indices.to_vec();
        idx.shuffle(&mut stream(seed, 0x5B17));
        let k = ((ratio * idx.len() as f64).round() as usize).clamp(1.min(idx.len()), idx.len());
        let val = idx.split_off(k);
        Self { train: idx, val }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Network inputs prepared once per sample.
struct Prepared<'a> {
    data: &'a Dataset,
    inputs: Vec<Vec<f32>>,
    poses: Vec<HandPose<f32>>,
    shape: [usize; 3],
}

impl<'a> Prepared<'a> {
    fn new(net: &HandNet<f32>, data: &'a Dataset) -> Result<Self> {
        let mut inputs = Vec::with_capacity(data.len());
        let mut shape = [0; 3];
        for s in &data.samples {
            let t = net.prepare_input(&[&s.csi])?;
            shape = [t.c, t.h, t.w];
            inputs.push(t.data);
        }
        Ok(Self {
            data,
            inputs,
            poses: data.samples.iter().map(|s| s.pose.clone()).collect(),
            shape,
        })
    }

    fn fit_norm(&self, net: &mut HandNet<f32>, idx: &[usize]) -> Result<()> {
        let items: Vec<&[f32]> = idx.iter().map(|&i| self.inputs[i].as_slice()).collect();
        net.fit_input_norm(&items)
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<&'a HandMask>, Vec<&HandPose<f32>>)> {
        let [c, h, w] = self.shape;
        let mut x = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i]);
        }
        let data = self.data;
        Ok((
            Tensor::from_vec(idx.len(), c, h, w, x)?,
            idx.iter().map(|&i| &data.samples[i].mask).collect(),
            idx.iter().map(|&i| &self.poses[i]).collect(),
        ))
    }
}

/// Loss terms and metrics of a network on a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub terms: LossTerms<f64>,
    pub total: f64,
    pub report: MetricReport,
}

const EVAL_BATCH: usize = 32;

fn evaluate_prepared(net: &HandNet<f32>, prep: &Prepared, idx: &[usize], obj: &Objective, pck_cfg: &PckConfig) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let mut terms = LossTerms::<f64>::default();
    let mut report = MetricReport {
        samples: idx.len(),
        ..MetricReport::default()
    };
    let (mut mpa_sum, mut iou_sum) = (0.0, 0.0);
    let inv = 1.0 / idx.len() as f64;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, masks, poses) = prep.batch(chunk)?;
        let fwd = net.forward(&x)?;
        let bl = batch_objective(&fwd, &masks, &poses, obj)?;
        let w = chunk.len() as f64 * inv;
        terms.mask += bl.terms.mask as f64 * w;
        terms.joint += bl.terms.joint as f64 * w;
        terms.bone_length += bl.terms.bone_length as f64 * w;
        terms.palmar += bl.terms.palmar as f64 * w;
        for (k, &i) in chunk.iter().enumerate() {
            let pred = fwd.pose_at(k)?.cast::<f64>();
            let truth = poses[k].cast::<f64>();
            report.mpjpe += mpjpe(&pred, &truth) * inv;
            report.pck += pck(&pred, &truth, pck_cfg) * inv;
            if let Some(logits) = &fwd.mask_logits {
                let probs: Vec<f32> = logits.item(k).iter().map(|&v| sigmoid(v)).collect();
                let ev = MaskEval::from_probabilities(&probs, &prep.data.samples[i].mask)?;
                let (a, u) = (mean_pixel_accuracy(&ev), iou(&ev));
                mpa_sum += a.value * inv;
                iou_sum += u.value * inv;
                report.mask_flagged += usize::from(a.flagged || u.flagged);
            }
        }
    }
    if net.config().multi_task {
        report.mpa = Some(mpa_sum);
        report.iou = Some(iou_sum);
    }
    report.mpjpe_cm = report.mpjpe * prep.data.meta.cm_per_unit;
    Ok(Evaluation {
        total: terms.total(&obj.weights),
        terms,
        report,
    })
}

/// Metrics and loss terms on `indices` of `data` (all samples when `None`).
pub fn evaluate_with(net: &HandNet<f32>, data: &Dataset, indices: Option<&[usize]>, obj: &Objective) -> Result<Evaluation> {
    let prep = Prepared::new(net, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let pck_cfg = PckConfig::from_cm(2.0, data.meta.cm_per_unit)?;
    evaluate_prepared(net, &prep, indices.unwrap_or(&all), obj, &pck_cfg)
}

/// Dataset-mean mPA, IoU, MPJPE and PCK@2cm of a checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset) -> Result<MetricReport> {
    let net = checkpoint.to_network()?;
    let cfg = net.config();
    let m = &data.meta;
    if (cfg.subcarriers, cfg.packets, cfg.antennas) != (m.subcarriers, m.packets, m.antennas)
        || (cfg.multi_task && cfg.mask_side != m.mask_side)
    {
        return Err(Error::Load(format!(
            "checkpoint expects CSI {}x{}x{} and {} masks, dataset has {}x{}x{} and {}",
            cfg.subcarriers, cfg.packets, cfg.antennas, cfg.mask_side, m.subcarriers, m.packets, m.antennas, m.mask_side
        )));
    }
    let obj = Objective {
        weights: checkpoint.loss_weights()?,
        ..Objective::default()
    };
    Ok(evaluate_with(&net, data, None, &obj)?.report)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's training batches, before each update.
    pub train: LossTerms<f64>,
    pub train_total: f64,
    pub palmar_skipped: usize,
    pub val: Option<Evaluation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Post-training evaluation on the training split.
    pub final_train: Option<Evaluation>,
    pub final_val: Option<Evaluation>,
}

fn terms_text(out: &mut String, prefix: &str, t: &LossTerms<f64>, total: f64) {
    let _ = write!(
        out,
        " {prefix}.mask={:.6e} {prefix}.joint={:.6e} {prefix}.bone_length={:.6e} {prefix}.palmar={:.6e} {prefix}.coral={:.6e} {prefix}.total={:.6e}",
        t.mask, t.joint, t.bone_length, t.palmar, t.coral, total
    );
}

fn report_text(out: &mut String, prefix: &str, r: &MetricReport) {
    if let (Some(mpa), Some(iou)) = (r.mpa, r.iou) {
        let _ = write!(out, " {prefix}.mpa={mpa:.6} {prefix}.iou={iou:.6}");
    }
    let _ = write!(out, " {prefix}.mpjpe={:.6} {prefix}.mpjpe_cm={:.4} {prefix}.pck={:.6}", r.mpjpe, r.mpjpe_cm, r.pck);
}

impl TrainLog {
    /// One `key=value` line per epoch plus `final` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = write!(out, "epoch={} lr={:.6e}", e.epoch, e.lr);
            terms_text(&mut out, "train", &e.train, e.train_total);
            if e.palmar_skipped > 0 {
                let _ = write!(out, " train.palmar_skipped={}", e.palmar_skipped);
            }
            if let Some(v) = &e.val {
                terms_text(&mut out, "val", &v.terms, v.total);
                report_text(&mut out, "val", &v.report);
            }
            out.push('\n');
        }
        for (name, ev) in [("train", &self.final_train), ("val", &self.final_val)] {
            if let Some(ev) = ev {
                let _ = write!(out, "final split={name} samples={}", ev.report.samples);
                terms_text(&mut out, "loss", &ev.terms, ev.total);
                report_text(&mut out, "metric", &ev.report);
                out.push('\n');
            }
        }
        out
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: HandNet<f32>,
    pub log: TrainLog,
    pub split: Split,
    pub steps: u64,
    pub objective: Objective,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::from_network(&self.net, &self.objective.weights, cfg.seed, self.steps)
    }
}

fn check_dataset(net: &NetworkConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let m = &data.meta;
    if (net.subcarriers, net.packets, net.antennas) != (m.subcarriers, m.packets, m.antennas) {
        return Err(Error::Config(format!(
            "network expects CSI {}x{}x{}, dataset has {}x{}x{}",
            net.subcarriers, net.packets, net.antennas, m.subcarriers, m.packets, m.antennas
        )));
    }
    if net.multi_task && net.mask_side != m.mask_side {
        return Err(Error::Config(format!("mask side {} vs dataset {}", net.mask_side, m.mask_side)));
    }
    Ok(())
}

fn non_finite_output(fwd: &crate::network::Forward<f32>) -> Option<&'static str> {
    if !fwd.latent.is_finite() {
        return Some("output.latent");
    }
    if fwd.mask_logits.as_ref().is_some_and(|m| !m.is_finite()) {
        return Some("output.mask_logits");
    }
    if !fwd.pose.is_finite() {
        return Some("output.pose");
    }
    None
}

fn non_finite_term(t: &LossTerms<f32>) -> Option<&'static str> {
    [
        ("loss.mask", t.mask),
        ("loss.joint", t.joint),
        ("loss.bone_length", t.bone_length),
        ("loss.palmar", t.palmar),
        ("loss.coral", t.coral),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n)
}

/// Shared optimizer state for both training loops.
struct Trainer<'a> {
    cfg: &'a TrainConfig,
    obj: Objective,
    net: HandNet<f32>,
    adam: Adam,
    step: u64,
    total_steps: usize,
}

impl Trainer<'_> {
    fn lr(&self) -> f64 {
        cosine_lr(self.cfg.lr, self.cfg.lr_min, self.step as usize, self.total_steps)
    }

    /// Clips, checks and applies one update.
    fn apply(&mut self, mut grads: Grads<f32>) -> Result<()> {
        if let Some(slot) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                tensor: format!("grad.{}", self.net.params().params()[slot].name),
            });
        }
        clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let lr = self.lr();
        self.adam.step(self.net.params_mut(), &grads, lr);
        self.step += 1;
        if let Some(p) = self.net.params().params().iter().find(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                tensor: format!("param.{}", p.name),
            });
        }
        Ok(())
    }
}

fn new_trainer<'a>(cfg: &'a TrainConfig, data: &Dataset, steps_per_epoch: usize) -> Result<Trainer<'a>> {
    cfg.validate()?;
    let (net_cfg, obj) = cfg.resolved();
    check_dataset(&net_cfg, data)?;
    let net = HandNet::<f32>::new(&net_cfg, cfg.seed)?;
    let adam = Adam::new(net.params(), cfg.adam_betas, cfg.adam_eps);
    Ok(Trainer {
        cfg,
        obj,
        net,
        adam,
        step: 0,
        total_steps: cfg.epochs * steps_per_epoch,
    })
}

fn finish(t: Trainer, prep: &Prepared, split: Split, mut log: TrainLog) -> Result<TrainOutcome> {
    let pck_cfg = PckConfig::from_cm(2.0, prep.data.meta.cm_per_unit)?;
    log.final_train = Some(evaluate_prepared(&t.net, prep, &split.train, &t.obj, &pck_cfg)?);
    if !split.val.is_empty() {
        log.final_val = Some(evaluate_prepared(&t.net, prep, &split.val, &t.obj, &pck_cfg)?);
    }
    Ok(TrainOutcome {
        net: t.net,
        log,
        split,
        steps: t.step,
        objective: t.obj,
    })
}

/// Plain multi-task training on one (possibly pooled) dataset.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let all: Vec<usize> = (0..data.len()).collect();
    let split = Split::new(&all, cfg.split, cfg.seed);
    let per_epoch = split.train.len().div_ceil(cfg.batch_size.max(1));
    let mut t = new_trainer(cfg, data, per_epoch)?;
    let prep = Prepared::new(&t.net, data)?;
    prep.fit_norm(&mut t.net, &split.train)?;
    let pck_cfg = PckConfig::from_cm(2.0, data.meta.cm_per_unit)?;
    let mut log = TrainLog::default();
    let mut order = split.train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, 0x1000 + epoch as u64));
        let lr = t.lr();
        let mut acc = LossTerms::<f64>::default();
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, masks, poses) = prep.batch(batch)?;
            let fwd = t.net.forward(&x)?;
            if let Some(name) = non_finite_output(&fwd) {
                return Err(Error::NonFinite { tensor: name.into() });
            }
            let bl = batch_objective(&fwd, &masks, &poses, &t.obj)?;
            if let Some(name) = non_finite_term(&bl.terms) {
                return Err(Error::NonFinite { tensor: name.into() });
            }
            let w = batch.len() as f64 / order.len() as f64;
            acc.mask += bl.terms.mask as f64 * w;
            acc.joint += bl.terms.joint as f64 * w;
            acc.bone_length += bl.terms.bone_length as f64 * w;
            acc.palmar += bl.terms.palmar as f64 * w;
            skipped += bl.palmar_skipped;
            let grads = t.net.backward(&fwd, &bl.grads)?;
            t.apply(grads)?;
        }
        let val = if split.val.is_empty() {
            None
        } else {
            Some(evaluate_prepared(&t.net, &prep, &split.val, &t.obj, &pck_cfg)?)
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_total: acc.total(&t.obj.weights),
            train: acc,
            palmar_skipped: skipped,
            val,
        });
    }
    finish(t, &prep, split, log)
}

/// Domain-generalized training: each step takes two half batches from
/// different domains in round-robin order, averages their task losses and
/// adds the CORAL distance of their latent features. With zero CORAL weight
/// this is plain [`train`] on the pooled data.
pub fn train_dg(data: &Dataset, cfg: &TrainConfig, schedule: &DomainSchedule) -> Result<TrainOutcome> {
    let (_, obj) = cfg.resolved();
    let present = DomainSchedule::from_dataset(data)?;
    for d in schedule.order() {
        if !present.order().contains(d) {
            return Err(Error::Config(format!("domain {d} has no samples")));
        }
    }
    if obj.weights.zeta == 0.0 {
        let pooled: Vec<usize> = (0..data.len()).filter(|&i| schedule.order().contains(&data.samples[i].domain)).collect();
        return train(&data.subset(&pooled), cfg);
    }
    if schedule.order().len() < 2 {
        return Err(Error::Config("CORAL needs at least two source domains".into()));
    }

    // Same split as plain training on the pooled domains.
    let pooled: Vec<usize> = (0..data.len()).filter(|&i| schedule.order().contains(&data.samples[i].domain)).collect();
    let split = Split::new(&pooled, cfg.split, cfg.seed);
    let per_domain: Vec<Vec<usize>> = schedule
        .order()
        .iter()
        .map(|&d| split.train.iter().copied().filter(|&i| data.samples[i].domain == d).collect())
        .collect();
    // Two half batches per step, so a step sees as many samples as in `train`.
    let bs = (cfg.batch_size / 2).max(1);
    let batches: usize = per_domain.iter().map(|v| v.len().div_ceil(bs)).sum();
    let mut t = new_trainer(cfg, data, batches.div_ceil(2))?;
    let prep = Prepared::new(&t.net, data)?;
    prep.fit_norm(&mut t.net, &split.train)?;
    let pck_cfg = PckConfig::from_cm(2.0, data.meta.cm_per_unit)?;
    let zeta = t.obj.weights.zeta as f32;
    let mut log = TrainLog::default();
    let n_train = split.train.len() as f64;
    for epoch in 1..=cfg.epochs {
        let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = per_domain
            .iter()
            .enumerate()
            .map(|(k, idx)| {
                let mut idx = idx.clone();
                idx.shuffle(&mut stream(cfg.seed, 0x2000 + ((epoch as u64) << 8) + k as u64));
                idx.chunks(bs).map(<[usize]>::to_vec).collect()
            })
            .collect();
        // Round-robin over domains that still have batches.
        let mut sequence = Vec::with_capacity(batches);
        while queues.iter().any(|q| !q.is_empty()) {
            for q in queues.iter_mut() {
                if let Some(b) = q.pop_front() {
                    sequence.push(b);
                }
            }
        }
        let lr = t.lr();
        let mut acc = LossTerms::<f64>::default();
        let (mut coral_sum, mut pairs, mut skipped) = (0.0, 0usize, 0);
        for group in sequence.chunks(2) {
            let mut fwds = Vec::with_capacity(2);
            let mut objectives = Vec::with_capacity(2);
            let in_step: usize = group.iter().map(Vec::len).sum();
            for b in group {
                let (x, masks, poses) = prep.batch(b)?;
                let fwd = t.net.forward(&x)?;
                if let Some(name) = non_finite_output(&fwd) {
                    return Err(Error::NonFinite { tensor: name.into() });
                }
                let bl = batch_objective(&fwd, &masks, &poses, &t.obj)?;
                if let Some(name) = non_finite_term(&bl.terms) {
                    return Err(Error::NonFinite { tensor: name.into() });
                }
                let w = b.len() as f64 / n_train;
                acc.mask += bl.terms.mask as f64 * w;
                acc.joint += bl.terms.joint as f64 * w;
                acc.bone_length += bl.terms.bone_length as f64 * w;
                acc.palmar += bl.terms.palmar as f64 * w;
                skipped += bl.palmar_skipped;
                let share = b.len() as f32 / in_step as f32;
                let mut bl = bl;
                for g in [&mut bl.grads.mask_logits, &mut bl.grads.pose].into_iter().flatten() {
                    *g = g.map(|v| v * share);
                }
                fwds.push(fwd);
                objectives.push(bl);
            }
            if let [f1, f2] = &fwds[..] {
                if f1.batch_size() >= 2 && f2.batch_size() >= 2 {
                    let (c, g1, g2) = coral_loss_grad(&f1.latent, &f2.latent)?;
                    if !c.is_finite() {
                        return Err(Error::NonFinite { tensor: "loss.coral".into() });
                    }
                    coral_sum += c as f64;
                    pairs += 1;
                    objectives[0].grads.latent = Some(g1.map(|v| v * zeta));
                    objectives[1].grads.latent = Some(g2.map(|v| v * zeta));
                }
            }
            let mut grads = t.net.params().zero_grads();
            for (fwd, bl) in fwds.iter().zip(&objectives) {
                t.net.backward_into(fwd, &bl.grads, &mut grads)?;
            }
            t.apply(grads)?;
        }
        acc.coral = if pairs > 0 { coral_sum / pairs as f64 } else { 0.0 };
        let val = if split.val.is_empty() {
            None
        } else {
            Some(evaluate_prepared(&t.net, &prep, &split.val, &t.obj, &pck_cfg)?)
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_total: acc.total(&t.obj.weights),
            train: acc,
            palmar_skipped: skipped,
            val,
        });
    }
    finish(t, &prep, split, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_sim::{default_domains, generate_dataset, GestureSet, SimConfig};
    use crate::losses::JointLossKind;

    pub(crate) fn tiny_sim() -> SimConfig {
        let mut sim = SimConfig::default();
        sim.channel.subcarriers = 12;
        sim.channel.packets = 4;
        sim.projection.side = 16;
        sim.projection.pixels_per_unit = 18.0;
        sim
    }

    pub(crate) fn tiny_cfg() -> TrainConfig {
        let mut c = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        c.network.subcarriers = 12;
        c.network.packets = 4;
        c.network.mask_side = 16;
        c.network.input_pool = (1, 1);
        c
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 10), 1e-3);
        assert!(cosine_lr(1e-3, 1e-5, 9, 10) - 1e-5 < 1e-18);
        assert!((cosine_lr(1.0, 0.0, 5, 11) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = Grads {
            slots: vec![vec![3.0f32, 0.0], vec![4.0]],
        };
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        let mut small = Grads { slots: vec![vec![0.3f32]] };
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.slots[0][0], 0.3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("w".into(), vec![2], vec![1.0, -1.0]);
        let mut adam = Adam::new(&ps, (0.9, 0.999), 1e-8);
        adam.step(&mut ps, &Grads { slots: vec![vec![0.5, -2.0]] }, 0.1);
        assert!((ps.get(0)[0] - 0.9).abs() < 1e-6);
        assert!((ps.get(0)[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let idx: Vec<usize> = (0..20).collect();
        let a = Split::new(&idx, 0.9, 1);
        assert_eq!(a, Split::new(&idx, 0.9, 1));
        assert_eq!((a.train.len(), a.val.len()), (18, 2));
        let mut all = [a.train.clone(), a.val.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, idx);
    }

    #[test]
    fn ablation_lattice() {
        let base = TrainConfig::default();
        let names = |a: Ablation| {
            let c = TrainConfig {
                ablation: Some(a),
                ..base.clone()
            };
            let (net, obj) = c.resolved();
            let names: Vec<String> = HandNet::<f32>::new(&net, 0).unwrap().params().params().iter().map(|p| p.name.clone()).collect();
            (names, obj)
        };
        let (a, oa) = names(Ablation::A);
        assert!(a.iter().all(|n| !n.starts_with("mask.") && !n.starts_with("embed.")));
        assert_eq!((oa.weights.alpha, oa.weights.gamma_pose, oa.weights.lambda), (0.0, 0.0, 0.0));
        let (d, _) = names(Ablation::D);
        let (e, oe) = names(Ablation::E);
        assert_eq!(oe.mask_kind, MaskLossKind::Mse);
        // Enabling the mask task only adds the mask decoder.
        let shared: Vec<&String> = e.iter().filter(|n| !n.starts_with("mask.")).collect();
        assert_eq!(shared, d.iter().collect::<Vec<_>>());
        let (_, of) = names(Ablation::F);
        let (_, og) = names(Ablation::G);
        assert_eq!((of.mask_kind, og.mask_kind), (MaskLossKind::Bce, MaskLossKind::Focal));
        assert_eq!(of.weights, og.weights);
        let (_, oh) = names(Ablation::H);
        assert!(oh.weights.gamma_pose > 0.0 && oh.weights.lambda > 0.0);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig {
            ablation: Some(Ablation::F),
            seed: 42,
            ..TrainConfig::default()
        };
        c.objective.joint_kind = JointLossKind::Mae;
        let back = TrainConfig::from_kv(&KvConfig::parse(&c.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_kv(&KvConfig::parse("split = 1.0").unwrap()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let data = generate_dataset(12, &default_domains(1), GestureSet::Digits, 1, &tiny_sim()).unwrap();
        let cfg = tiny_cfg();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.checkpoint(&cfg).to_bytes().unwrap(), b.checkpoint(&cfg).to_bytes().unwrap());
        assert_eq!(a.log.epochs.len(), 3);
        assert_eq!(a.steps, 3 * 3);
        let text = a.log.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("epoch=")).count(), 3);
        assert!(text.contains("final split=train"));
        // Re-evaluating the trained net reproduces the logged final metrics.
        let ev = evaluate_with(&a.net, &data, Some(&a.split.train), &a.objective).unwrap();
        assert_eq!(Some(ev), a.log.final_train);
    }

    #[test]
    fn dg_requires_two_domains_and_reduces_to_train() {
        let sim = tiny_sim();
        let data = generate_dataset(16, &default_domains(2), GestureSet::Digits, 2, &sim).unwrap();
        let cfg = tiny_cfg();
        let one = DomainSchedule::new(vec![0]).unwrap();
        assert!(matches!(train_dg(&data, &cfg, &one), Err(Error::Config(_))));

        let both = DomainSchedule::from_dataset(&data).unwrap();
        let dg = train_dg(&data, &cfg, &both).unwrap();
        assert!(dg.log.epochs.iter().all(|e| e.train.coral > 0.0));

        let mut plain = cfg.clone();
        plain.objective.weights.zeta = 0.0;
        let a = train_dg(&data, &plain, &both).unwrap();
        let b = train(&data, &plain).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn divergence_names_the_tensor() {
        let data = generate_dataset(8, &default_domains(1), GestureSet::Digits, 1, &tiny_sim()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.lr = 1e30;
        cfg.clip_norm = 1e30;
        match train(&data, &cfg) {
            Err(Error::NonFinite { tensor }) => assert!(!tensor.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.to_text())),
        }
    }
}
