//! HandNet: the grouped RF embedding, a multi-scale encoder producing the
//! latent vector `r`, a mask decoder emitting logits, and a pose decoder
//! with a logistic output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csi_processing::{normalize_sample, stack_real_imag, CsiSample, EmbeddingMode, EmbeddingWeights};
use crate::error::{Error, Result};
use crate::hand_model::{HandPose, NUM_JOINTS};
use crate::kv::{join, KvConfig};
use crate::nn::{
    avg_pool, avg_pool_backward, broadcast_plane, concat_channels, global_avg_pool, leaky_backward,
    leaky_forward, sigmoid, split_channels, sum_plane, Conv2d, ConvTranspose2d, Grads, Linear, ParamStore, Tensor,
    Window,
};
use crate::scalar::Scalar;

pub const POSE_OUTPUTS: usize = NUM_JOINTS * 3;
pub const UPSAMPLE_STAGES: usize = 5;
const UPSAMPLE_KERNEL: usize = 5;
const MIN_GRID: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub subcarriers: usize,
    pub packets: usize,
    pub antennas: usize,
    /// Subtract a fitted per-(channel, subcarrier) mean and divide by a
    /// fitted global scale before everything else.
    pub input_standardize: bool,
    pub embedding_enabled: bool,
    pub embedding_filters: usize,
    pub embedding_mode: EmbeddingMode,
    /// Average pooling applied to the (subcarrier, packet) plane before the first block.
    pub input_pool: (usize, usize),
    pub blocks: usize,
    /// Output channels of the pooled, 1x7/7x1, 3x3 and 1x1 pathways.
    pub pathway_widths: [usize; 4],
    /// Inner width of the factorized and 3x3 pathways.
    pub pathway_mid: usize,
    pub latent_dim: usize,
    pub multi_task: bool,
    pub mask_side: usize,
    pub mask_channels: usize,
    pub residual_blocks: usize,
    /// Output channels of the first four upsampling stages; the fifth emits one.
    pub upsample_channels: [usize; 4],
    pub pose_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            subcarriers: 114,
            packets: 20,
            antennas: 3,
            input_standardize: true,
            embedding_enabled: true,
            embedding_filters: 8,
            embedding_mode: EmbeddingMode::Shared,
            input_pool: (1, 1),
            blocks: 2,
            pathway_widths: [16, 32, 32, 16],
            pathway_mid: 16,
            latent_dim: 128,
            multi_task: true,
            mask_side: 114,
            mask_channels: 64,
            residual_blocks: 14,
            upsample_channels: [64, 32, 32, 16],
            pose_hidden: vec![256, 256],
        }
    }
}

impl NetworkConfig {
    /// Narrow variant sized for single-core training runs.
    pub fn reduced() -> Self {
        Self {
            embedding_filters: 4,
            input_pool: (2, 4),
            pathway_widths: [8, 8, 8, 8],
            pathway_mid: 8,
            latent_dim: 64,
            mask_channels: 16,
            residual_blocks: 2,
            upsample_channels: [16, 16, 8, 8],
            pose_hidden: vec![128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("subcarriers", self.subcarriers),
            ("packets", self.packets),
            ("antennas", self.antennas),
            ("embedding_filters", self.embedding_filters),
            ("input_pool", self.input_pool.0.min(self.input_pool.1)),
            ("blocks", self.blocks),
            ("pathway_mid", self.pathway_mid),
            ("latent_dim", self.latent_dim),
            ("mask_side", self.mask_side),
            ("mask_channels", self.mask_channels),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("network `{name}` must be positive")));
            }
        }
        if self.pathway_widths.contains(&0) || self.upsample_channels.contains(&0) || self.pose_hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.subcarriers < self.input_pool.0 || self.packets < self.input_pool.1 {
            return Err(Error::Config("input pooling larger than the CSI window".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.antennas
    }

    fn encoder_in_channels(&self) -> usize {
        if self.embedding_enabled {
            self.embedding_filters * self.antennas
        } else {
            self.input_channels()
        }
    }

    fn block_out_channels(&self) -> usize {
        self.pathway_widths.iter().sum()
    }

    /// Spatial size entering each block, then the size after the last one.
    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        let mut d = (self.subcarriers / self.input_pool.0, self.packets / self.input_pool.1);
        let mut out = vec![d];
        for _ in 0..self.blocks {
            let (ph, pw) = pool_factors(d);
            d = (d.0 / ph, d.1 / pw);
            out.push(d);
        }
        out
    }

    fn flat_features(&self) -> usize {
        let (h, w) = *self.encoder_dims().last().expect("non-empty");
        self.block_out_channels() * h * w
    }

    /// Side of the square grid the mask decoder starts from, and the
    /// `(stride, output_padding)` of each of the five upsampling stages.
    pub fn upsample_schedule(&self) -> (usize, [(usize, usize); UPSAMPLE_STAGES]) {
        let mut s = self.mask_side;
        let mut strided = Vec::new();
        while s > MIN_GRID && strided.len() < UPSAMPLE_STAGES {
            if s % 2 == 0 {
                strided.push((2, 1));
                s /= 2;
            } else {
                strided.push((2, 0));
                s = (s + 1) / 2;
            }
        }
        let mut stages = [(1, 0); UPSAMPLE_STAGES];
        let first = UPSAMPLE_STAGES - strided.len();
        for (k, st) in strided.into_iter().rev().enumerate() {
            stages[first + k] = st;
        }
        (s, stages)
    }

    fn upsample_io(&self) -> [(usize, usize); UPSAMPLE_STAGES] {
        let c = self.upsample_channels;
        [
            (self.mask_channels, c[0]),
            (c[0], c[1]),
            (c[1], c[2]),
            (c[2], c[3]),
            (c[3], 1),
        ]
    }

    /// Exact number of scalar parameters the network allocates.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        if self.embedding_enabled {
            total += self.antennas * self.embedding_filters * self.embedding_mode.weights_per_filter();
        }
        let [w1, w2, w3, w4] = self.pathway_widths;
        let m = self.pathway_mid;
        let mut cin = self.encoder_in_channels();
        for _ in 0..self.blocks {
            total += Conv2d::param_count(cin, w1, 1, 1, true)
                + Conv2d::param_count(cin, m, 1, 7, true)
                + Conv2d::param_count(m, m, 7, 1, true)
                + Conv2d::param_count(m, w2, 1, 1, true)
                + Conv2d::param_count(cin, m, 1, 1, true)
                + Conv2d::param_count(m, w3, 3, 3, true)
                + Conv2d::param_count(cin, w4, 1, 1, true);
            cin = self.block_out_channels();
        }
        total += Linear::param_count(self.flat_features(), self.latent_dim);
        if self.multi_task {
            let (g, _) = self.upsample_schedule();
            let c = self.mask_channels;
            total += Linear::param_count(self.latent_dim, c * g * g);
            total += self.residual_blocks * 2 * Conv2d::param_count(c, c, 3, 3, true);
            for (cin, cout) in self.upsample_io() {
                total += ConvTranspose2d::param_count(cin, cout, UPSAMPLE_KERNEL);
            }
        }
        let mut fin = self.latent_dim;
        for &h in &self.pose_hidden {
            total += Linear::param_count(fin, h);
            fin = h;
        }
        total + Linear::param_count(fin, POSE_OUTPUTS)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("subcarriers", self.subcarriers);
        kv.set("packets", self.packets);
        kv.set("antennas", self.antennas);
        kv.set("input_standardize", self.input_standardize);
        kv.set("embedding", self.embedding_enabled);
        kv.set("embedding_filters", self.embedding_filters);
        kv.set("embedding_mode", self.embedding_mode);
        kv.set("input_pool", join(&[self.input_pool.0, self.input_pool.1]));
        kv.set("blocks", self.blocks);
        kv.set("pathway_widths", join(&self.pathway_widths));
        kv.set("pathway_mid", self.pathway_mid);
        kv.set("latent_dim", self.latent_dim);
        kv.set("multi_task", self.multi_task);
        kv.set("mask_side", self.mask_side);
        kv.set("mask_channels", self.mask_channels);
        kv.set("residual_blocks", self.residual_blocks);
        kv.set("upsample_channels", join(&self.upsample_channels));
        kv.set("pose_hidden", join(&self.pose_hidden));
        kv
    }

    /// Reads a config; `preset = full | reduced` picks the base and every
    /// other key overrides it.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = match kv.get("preset") {
            None | Some("full") => Self::default(),
            Some("reduced") => Self::reduced(),
            Some(other) => return Err(Error::Config(format!("unknown network preset `{other}`"))),
        };
        macro_rules! field {
            ($key:literal, $f:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $f = v;
                }
            };
        }
        field!("subcarriers", cfg.subcarriers);
        field!("packets", cfg.packets);
        field!("antennas", cfg.antennas);
        field!("input_standardize", cfg.input_standardize);
        field!("embedding", cfg.embedding_enabled);
        field!("embedding_filters", cfg.embedding_filters);
        field!("embedding_mode", cfg.embedding_mode);
        field!("blocks", cfg.blocks);
        field!("pathway_mid", cfg.pathway_mid);
        field!("latent_dim", cfg.latent_dim);
        field!("multi_task", cfg.multi_task);
        field!("mask_side", cfg.mask_side);
        field!("mask_channels", cfg.mask_channels);
        field!("residual_blocks", cfg.residual_blocks);
        if let Some(v) = kv.list_opt::<usize>("input_pool")? {
            let [a, b] = v[..] else {
                return Err(Error::Config("`input_pool` needs two values".into()));
            };
            cfg.input_pool = (a, b);
        }
        if let Some(v) = kv.list_opt::<usize>("pathway_widths")? {
            cfg.pathway_widths = v
                .try_into()
                .map_err(|_| Error::Config("`pathway_widths` needs four values".into()))?;
        }
        if let Some(v) = kv.list_opt::<usize>("upsample_channels")? {
            cfg.upsample_channels = v
                .try_into()
                .map_err(|_| Error::Config("`upsample_channels` needs four values".into()))?;
        }
        if let Some(v) = kv.list_opt("pose_hidden")? {
            cfg.pose_hidden = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pool_factors((h, w): (usize, usize)) -> (usize, usize) {
    (if h >= 2 { 2 } else { 1 }, if w >= 2 { 2 } else { 1 })
}

/// Grouped, bias-free point-wise layer over each antenna's (re, im) pair.
#[derive(Clone, Debug)]
struct Embed {
    weight: usize,
    antennas: usize,
    filters: usize,
    mode: EmbeddingMode,
}

impl Embed {
    fn part_weights<T: Scalar>(&self, w: &[T], a: usize, i: usize) -> (T, T) {
        match self.mode {
            EmbeddingMode::Shared => (w[a * self.filters + i], w[a * self.filters + i]),
            EmbeddingMode::Split => (w[(a * self.filters + i) * 2], w[(a * self.filters + i) * 2 + 1]),
        }
    }

    fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let plane = x.h * x.w;
        let w = ps.get(self.weight);
        let mut y = Tensor::zeros(x.n, self.antennas * self.filters, x.h, x.w);
        for n in 0..x.n {
            let src = x.item(n);
            let dst = y.item_mut(n);
            for a in 0..self.antennas {
                let re = &src[2 * a * plane..(2 * a + 1) * plane];
                let im = &src[(2 * a + 1) * plane..(2 * a + 2) * plane];
                for i in 0..self.filters {
                    let (wa, wb) = self.part_weights(w, a, i);
                    let out = &mut dst[(a * self.filters + i) * plane..(a * self.filters + i + 1) * plane];
                    for ((o, &r), &m) in out.iter_mut().zip(re).zip(im) {
                        *o = wa * r + wb * m;
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight gradients only; the input is data.
    fn backward<T: Scalar>(&self, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Grads<T>) {
        let plane = x.h * x.w;
        let g = grads.slot_mut(self.weight);
        for n in 0..x.n {
            let src = x.item(n);
            let gsrc = gy.item(n);
            for a in 0..self.antennas {
                let re = &src[2 * a * plane..(2 * a + 1) * plane];
                let im = &src[(2 * a + 1) * plane..(2 * a + 2) * plane];
                for i in 0..self.filters {
                    let c = a * self.filters + i;
                    let go = &gsrc[c * plane..(c + 1) * plane];
                    let dr: T = go.iter().zip(re).map(|(&g, &r)| g * r).sum();
                    let dm: T = go.iter().zip(im).map(|(&g, &m)| g * m).sum();
                    match self.mode {
                        EmbeddingMode::Shared => g[c] += dr + dm,
                        EmbeddingMode::Split => {
                            g[2 * c] += dr;
                            g[2 * c + 1] += dm;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct MultiScaleBlock {
    p1: Conv2d,
    p2a: Conv2d,
    p2b: Conv2d,
    p2c: Conv2d,
    p3a: Conv2d,
    p3b: Conv2d,
    p4: Conv2d,
    widths: [usize; 4],
}

/// Pre-activations `z` and activations `a` of one conv + leaky stage.
#[derive(Clone, Debug)]
struct Act<T> {
    z: Tensor<T>,
    a: Tensor<T>,
}

impl<T: Scalar> Act<T> {
    fn new(z: Tensor<T>) -> Self {
        let a = leaky_forward(&z);
        Self { z, a }
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    x: Tensor<T>,
    gap: Tensor<T>,
    p1: Act<T>,
    p2a: Act<T>,
    p2b: Act<T>,
    p2c: Act<T>,
    p3a: Act<T>,
    p3b: Act<T>,
    p4: Act<T>,
    cat_shape: [usize; 4],
    pool: (usize, usize),
}

impl MultiScaleBlock {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, cin: usize, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3, w4] = cfg.pathway_widths;
        let m = cfg.pathway_mid;
        let pt = Window::new((1, 1), (1, 1), (0, 0));
        Self {
            p1: Conv2d::new(ps, &format!("{name}.pool.conv"), cin, w1, pt, true, rng),
            p2a: Conv2d::new(ps, &format!("{name}.fact.time"), cin, m, Window::new((1, 7), (1, 1), (0, 3)), true, rng),
            p2b: Conv2d::new(ps, &format!("{name}.fact.freq"), m, m, Window::new((7, 1), (1, 1), (3, 0)), true, rng),
            p2c: Conv2d::new(ps, &format!("{name}.fact.mix"), m, w2, pt, true, rng),
            p3a: Conv2d::new(ps, &format!("{name}.local.reduce"), cin, m, pt, true, rng),
            p3b: Conv2d::new(ps, &format!("{name}.local.conv"), m, w3, Window::new((3, 3), (1, 1), (1, 1)), true, rng),
            p4: Conv2d::new(ps, &format!("{name}.point.conv"), cin, w4, pt, true, rng),
            widths: cfg.pathway_widths,
        }
    }

    fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let gap = global_avg_pool(&x);
        let p1 = Act::new(self.p1.forward(ps, &gap));
        let p2a = Act::new(self.p2a.forward(ps, &x));
        let p2b = Act::new(self.p2b.forward(ps, &p2a.a));
        let p2c = Act::new(self.p2c.forward(ps, &p2b.a));
        let p3a = Act::new(self.p3a.forward(ps, &x));
        let p3b = Act::new(self.p3b.forward(ps, &p3a.a));
        let p4 = Act::new(self.p4.forward(ps, &x));
        let b1 = broadcast_plane(&p1.a, x.h, x.w);
        let cat = concat_channels(&[&b1, &p2c.a, &p3b.a, &p4.a]);
        let pool = pool_factors((cat.h, cat.w));
        let y = avg_pool(&cat, pool.0, pool.1);
        let cache = BlockCache {
            cat_shape: cat.shape(),
            x,
            gap,
            p1,
            p2a,
            p2b,
            p2c,
            p3a,
            p3b,
            p4,
            pool,
        };
        (y, cache)
    }

    fn backward<T: Scalar>(&self, ps: &ParamStore<T>, c: &BlockCache<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let gcat = avg_pool_backward(c.cat_shape, gy, c.pool.0, c.pool.1);
        let parts = split_channels(&gcat, &self.widths);
        // pooled pathway: broadcast then global average
        let g1 = leaky_backward(&c.p1.z, &sum_plane(&parts[0]));
        let ggap = self.p1.backward(ps, &c.gap, &g1, grads);
        let inv = T::one() / T::of((c.x.h * c.x.w) as f64);
        let mut gx = broadcast_plane(&ggap.map(|v| v * inv), c.x.h, c.x.w);

        let g = leaky_backward(&c.p2c.z, &parts[1]);
        let g = leaky_backward(&c.p2b.z, &self.p2c.backward(ps, &c.p2b.a, &g, grads));
        let g = leaky_backward(&c.p2a.z, &self.p2b.backward(ps, &c.p2a.a, &g, grads));
        gx.add_assign(&self.p2a.backward(ps, &c.x, &g, grads));

        let g = leaky_backward(&c.p3b.z, &parts[2]);
        let g = leaky_backward(&c.p3a.z, &self.p3b.backward(ps, &c.p3a.a, &g, grads));
        gx.add_assign(&self.p3a.backward(ps, &c.x, &g, grads));

        let g = leaky_backward(&c.p4.z, &parts[3]);
        gx.add_assign(&self.p4.backward(ps, &c.x, &g, grads));
        gx
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
struct ResCache<T> {
    pre: Tensor<T>,
    a: Tensor<T>,
    inner: Act<T>,
}

#[derive(Clone, Debug)]
struct MaskDecoder {
    fc: Linear,
    channels: usize,
    grid: usize,
    res: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
}

#[derive(Clone, Debug)]
struct MaskCache<T> {
    r: Tensor<T>,
    res: Vec<ResCache<T>>,
    /// Residual stream after the last block (pre-activation).
    stream: Tensor<T>,
    /// Input to each upsampling stage.
    up_in: Vec<Tensor<T>>,
    /// Pre-activation output of each stage except the last.
    up_z: Vec<Tensor<T>>,
}

impl MaskDecoder {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let (grid, sched) = cfg.upsample_schedule();
        let c = cfg.mask_channels;
        let fc = Linear::new(ps, "mask.fc", cfg.latent_dim, c * grid * grid, rng);
        let res = (0..cfg.residual_blocks)
            .map(|k| {
                let win = Window::new((3, 3), (1, 1), (1, 1));
                ResBlock {
                    conv1: Conv2d::new(ps, &format!("mask.res{k}.conv1"), c, c, win, true, rng),
                    conv2: Conv2d::new(ps, &format!("mask.res{k}.conv2"), c, c, win, true, rng),
                }
            })
            .collect();
        let up = cfg
            .upsample_io()
            .into_iter()
            .zip(sched)
            .enumerate()
            .map(|(k, ((cin, cout), (s, op)))| {
                let pad = UPSAMPLE_KERNEL / 2;
                let win = Window::new((UPSAMPLE_KERNEL, UPSAMPLE_KERNEL), (s, s), (pad, pad));
                ConvTranspose2d::new(ps, &format!("mask.up{k}"), cin, cout, win, (op, op), rng)
            })
            .collect();
        Self {
            fc,
            channels: c,
            grid,
            res,
            up,
        }
    }

    fn forward<T: Scalar>(&self, ps: &ParamStore<T>, r: &Tensor<T>) -> (Tensor<T>, MaskCache<T>) {
        let mut x = self
            .fc
            .forward(ps, r)
            .reshaped(self.channels, self.grid, self.grid)
            .expect("fc width matches grid");
        let mut res = Vec::with_capacity(self.res.len());
        for blk in &self.res {
            let a = leaky_forward(&x);
            let inner = Act::new(blk.conv1.forward(ps, &a));
            let z2 = blk.conv2.forward(ps, &inner.a);
            let mut next = x.clone();
            next.add_assign(&z2);
            res.push(ResCache { pre: x, a, inner });
            x = next;
        }
        let mut up_in = Vec::with_capacity(self.up.len());
        let mut up_z = Vec::with_capacity(self.up.len() - 1);
        let mut h = leaky_forward(&x);
        let last = self.up.len() - 1;
        let mut logits = None;
        for (k, stage) in self.up.iter().enumerate() {
            let z = stage.forward(ps, &h);
            up_in.push(h);
            if k == last {
                logits = Some(z);
                break;
            }
            h = leaky_forward(&z);
            up_z.push(z);
        }
        let cache = MaskCache {
            r: r.clone(),
            res,
            stream: x,
            up_in,
            up_z,
        };
        (logits.expect("at least one stage"), cache)
    }

    fn backward<T: Scalar>(&self, ps: &ParamStore<T>, c: &MaskCache<T>, g_logits: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let mut g = g_logits.clone();
        for k in (0..self.up.len()).rev() {
            g = self.up[k].backward(ps, &c.up_in[k], &g, grads);
            g = if k > 0 {
                leaky_backward(&c.up_z[k - 1], &g)
            } else {
                leaky_backward(&c.stream, &g)
            };
        }
        for (blk, rc) in self.res.iter().zip(&c.res).rev() {
            let gi = blk.conv2.backward(ps, &rc.inner.a, &g, grads);
            let gi = leaky_backward(&rc.inner.z, &gi);
            let gi = blk.conv1.backward(ps, &rc.a, &gi, grads);
            g.add_assign(&leaky_backward(&rc.pre, &gi));
        }
        let g = g.flattened();
        self.fc.backward(ps, &c.r, &g, grads)
    }
}

#[derive(Clone, Debug)]
struct PoseDecoder {
    layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct PoseCache<T> {
    inputs: Vec<Tensor<T>>,
    hidden_z: Vec<Tensor<T>>,
}

impl PoseDecoder {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut fin = cfg.latent_dim;
        let mut layers = Vec::new();
        for (k, &h) in cfg.pose_hidden.iter().enumerate() {
            layers.push(Linear::new(ps, &format!("pose.fc{k}"), fin, h, rng));
            fin = h;
        }
        layers.push(Linear::new(ps, "pose.out", fin, POSE_OUTPUTS, rng));
        Self { layers }
    }

    fn forward<T: Scalar>(&self, ps: &ParamStore<T>, r: &Tensor<T>) -> (Tensor<T>, PoseCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_z = Vec::new();
        let mut h = r.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(ps, &h);
            inputs.push(h);
            if k == last {
                return (z.map(sigmoid), PoseCache { inputs, hidden_z });
            }
            h = leaky_forward(&z);
            hidden_z.push(z);
        }
        unreachable!("pose decoder has an output layer")
    }

    fn backward<T: Scalar>(&self, ps: &ParamStore<T>, c: &PoseCache<T>, pose: &Tensor<T>, g_pose: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let mut g = Tensor {
            data: pose
                .data
                .iter()
                .zip(&g_pose.data)
                .map(|(&p, &g)| g * p * (T::one() - p))
                .collect(),
            ..*g_pose
        };
        for k in (0..self.layers.len()).rev() {
            g = self.layers[k].backward(ps, &c.inputs[k], &g, grads);
            if k > 0 {
                g = leaky_backward(&c.hidden_z[k - 1], &g);
            }
        }
        g
    }
}

/// Intermediate activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    embedded: Option<Tensor<T>>,
    pooled_shape: [usize; 4],
    blocks: Vec<BlockCache<T>>,
    flat: Tensor<T>,
    mask: Option<MaskCache<T>>,
    pose: PoseCache<T>,
}

/// Outputs of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// `n x d x 1 x 1`.
    pub latent: Tensor<T>,
    /// `n x 1 x side x side`, absent for single-task networks.
    pub mask_logits: Option<Tensor<T>>,
    /// `n x 63 x 1 x 1`, every value in (0, 1).
    pub pose: Tensor<T>,
    pub cache: ForwardCache<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn pose_at(&self, i: usize) -> Result<HandPose<T>> {
        HandPose::from_flat(self.pose.item(i))
    }

    pub fn batch_size(&self) -> usize {
        self.latent.n
    }
}

/// Gradients of a scalar objective with respect to the network outputs.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads<T> {
    pub latent: Option<Tensor<T>>,
    pub mask_logits: Option<Tensor<T>>,
    pub pose: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct HandNet<T> {
    cfg: NetworkConfig,
    params: ParamStore<T>,
    /// Non-trainable tensors (`input.mean`, `input.scale`).
    buffers: ParamStore<T>,
    embed: Option<Embed>,
    blocks: Vec<MultiScaleBlock>,
    proj: Linear,
    mask: Option<MaskDecoder>,
    pose: PoseDecoder,
}

// Each component draws from its own stream so toggling one head leaves
// the initial weights of the others unchanged.
const STREAM_EMBED: u64 = 1;
const STREAM_ENCODER: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_POSE: u64 = 4;

impl<T: Scalar> HandNet<T> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng_for = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let mut ps = ParamStore::new();
        let embed = cfg.embedding_enabled.then(|| {
            let mut rng = rng_for(STREAM_EMBED);
            let per = cfg.embedding_mode.weights_per_filter();
            // Each output should see unit-scale inputs: bound sqrt(3 / parts).
            let bound = (3.0 / 2.0f64).sqrt();
            let weight = ps.add_uniform("embed.weight".into(), vec![cfg.antennas, cfg.embedding_filters, per], bound, &mut rng);
            Embed {
                weight,
                antennas: cfg.antennas,
                filters: cfg.embedding_filters,
                mode: cfg.embedding_mode,
            }
        });
        let mut rng = rng_for(STREAM_ENCODER);
        let mut cin = cfg.encoder_in_channels();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            blocks.push(MultiScaleBlock::new(&mut ps, &format!("encoder.block{k}"), cin, cfg, &mut rng));
            cin = cfg.block_out_channels();
        }
        let proj = Linear::new(&mut ps, "encoder.proj", cfg.flat_features(), cfg.latent_dim, &mut rng);
        let mask = cfg
            .multi_task
            .then(|| MaskDecoder::new(&mut ps, cfg, &mut rng_for(STREAM_MASK)));
        let pose = PoseDecoder::new(&mut ps, cfg, &mut rng_for(STREAM_POSE));
        let mut buffers = ParamStore::new();
        if cfg.input_standardize {
            let c = cfg.input_channels();
            buffers.add("input.mean".into(), vec![c, cfg.subcarriers], vec![T::zero(); c * cfg.subcarriers]);
            buffers.add("input.scale".into(), vec![1], vec![T::one()]);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            buffers,
            embed,
            blocks,
            proj,
            mask,
            pose,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.buffers
    }

    /// Sets the input statistics from prepared training items
    /// (`2Ant x F x T` each). No-op when standardization is off.
    pub fn fit_input_norm(&mut self, items: &[&[T]]) -> Result<()> {
        if !self.cfg.input_standardize {
            return Ok(());
        }
        let (c, f, t) = (self.cfg.input_channels(), self.cfg.subcarriers, self.cfg.packets);
        if items.is_empty() || items.iter().any(|x| x.len() != c * f * t) {
            return Err(Error::Shape(format!("input statistics need non-empty {c}x{f}x{t} items")));
        }
        let count = (items.len() * t) as f64;
        let mut mean = vec![0.0f64; c * f];
        for x in items {
            for (row, m) in x.chunks(t).zip(mean.iter_mut()) {
                *m += row.iter().map(|v| v.as_f64()).sum::<f64>() / count;
            }
        }
        let mut var = 0.0;
        for x in items {
            for (row, m) in x.chunks(t).zip(&mean) {
                var += row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
        }
        let std = (var / (count * (c * f) as f64)).sqrt();
        let scale = if std > 0.0 && std.is_finite() { std } else { 1.0 };
        let slot = self.buffers.slot_of("input.mean").expect("standardizing net has input.mean");
        for (d, m) in self.buffers.get_mut(slot).iter_mut().zip(&mean) {
            *d = T::of(*m);
        }
        let slot = self.buffers.slot_of("input.scale").expect("standardizing net has input.scale");
        self.buffers.get_mut(slot)[0] = T::of(scale);
        Ok(())
    }

    fn standardize(&self, x: &Tensor<T>) -> Tensor<T> {
        let (Some(mean), Some(scale)) = (self.buffers.by_name("input.mean"), self.buffers.by_name("input.scale")) else {
            return x.clone();
        };
        let inv = T::one() / scale.value[0];
        let t = x.w;
        let mut out = x.clone();
        for i in 0..x.n {
            for (row, &m) in out.item_mut(i).chunks_mut(t).zip(&mean.value) {
                for v in row {
                    *v = (*v - m) * inv;
                }
            }
        }
        out
    }

    /// Current embedding weights as the preprocessing type.
    pub fn embedding_weights(&self) -> Option<EmbeddingWeights<T>> {
        self.embed.as_ref().map(|e| {
            EmbeddingWeights::new(e.antennas, e.filters, e.mode, self.params.get(e.weight).to_vec())
                .expect("stored embedding has the configured shape")
        })
    }

    /// Normalizes, stacks, and batches samples into `n x 2Ant x F x T`.
    pub fn prepare_input<U: Scalar>(&self, samples: &[&CsiSample<U>]) -> Result<Tensor<T>> {
        let (f, t, a) = (self.cfg.subcarriers, self.cfg.packets, self.cfg.antennas);
        let mut data = Vec::with_capacity(samples.len() * f * t * 2 * a);
        for s in samples {
            if s.shape() != (f, t, a) {
                return Err(Error::Shape(format!(
                    "network expects CSI {f}x{t}x{a}, got {:?}",
                    s.shape()
                )));
            }
            let stacked = stack_real_imag(&normalize_sample(s)?);
            data.extend(stacked.to_chw().into_iter().map(|v| T::of(v.as_f64())));
        }
        Tensor::from_vec(samples.len(), 2 * a, f, t, data)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = [self.cfg.input_channels(), self.cfg.subcarriers, self.cfg.packets];
        if [x.c, x.h, x.w] != want || x.n == 0 {
            return Err(Error::Shape(format!(
                "network input must be n x {} x {} x {}, got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Applies the embedding layer (identity when disabled).
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let x = self.standardize(x);
        Ok(match &self.embed {
            Some(e) => e.forward(&self.params, &x),
            None => x,
        })
    }

    /// Encoder on an embedded `n x C x F x T` batch; returns `n x d x 1 x 1`.
    pub fn encode(&self, embedded: &Tensor<T>) -> Result<Tensor<T>> {
        let want = [self.cfg.encoder_in_channels(), self.cfg.subcarriers, self.cfg.packets];
        if [embedded.c, embedded.h, embedded.w] != want || embedded.n == 0 {
            return Err(Error::Shape(format!(
                "encoder input must be n x {} x {} x {}, got {:?}",
                want[0],
                want[1],
                want[2],
                embedded.shape()
            )));
        }
        Ok(self.encode_cached(embedded.clone()).0)
    }

    fn encode_cached(&self, embedded: Tensor<T>) -> (Tensor<T>, [usize; 4], Vec<BlockCache<T>>, Tensor<T>) {
        let pooled_shape = embedded.shape();
        let mut x = avg_pool(&embedded, self.cfg.input_pool.0, self.cfg.input_pool.1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&self.params, x);
            caches.push(c);
            x = y;
        }
        let flat = x.flattened();
        let r = self.proj.forward(&self.params, &flat);
        (r, pooled_shape, caches, flat)
    }

    fn check_latent(&self, r: &Tensor<T>) -> Result<()> {
        if r.item_len() != self.cfg.latent_dim || r.n == 0 {
            return Err(Error::Shape(format!(
                "latent must have {} features, got {:?}",
                self.cfg.latent_dim,
                r.shape()
            )));
        }
        Ok(())
    }

    pub fn decode_mask(&self, r: &Tensor<T>) -> Result<Tensor<T>> {
        let dec = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("mask decoder requested on a single-task network".into()))?;
        self.check_latent(r)?;
        Ok(dec.forward(&self.params, r).0)
    }

    pub fn decode_pose(&self, r: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(r)?;
        Ok(self.pose.forward(&self.params, r).0)
    }

    /// Full pass over a prepared batch, keeping activations for [`Self::backward`].
    pub fn forward(&self, x: &Tensor<T>) -> Result<Forward<T>> {
        self.check_input(x)?;
        let x = &self.standardize(x);
        let embedded = self.embed.as_ref().map(|e| e.forward(&self.params, x));
        let enc_in = embedded.clone().unwrap_or_else(|| x.clone());
        let (latent, pooled_shape, blocks, flat) = self.encode_cached(enc_in);
        let (mask_logits, mask) = match &self.mask {
            Some(dec) => {
                let (m, c) = dec.forward(&self.params, &latent);
                (Some(m), Some(c))
            }
            None => (None, None),
        };
        let (pose, pose_cache) = self.pose.forward(&self.params, &latent);
        Ok(Forward {
            latent,
            mask_logits,
            pose,
            cache: ForwardCache {
                input: x.clone(),
                embedded,
                pooled_shape,
                blocks,
                flat,
                mask,
                pose: pose_cache,
            },
        })
    }

    /// Parameter gradients of an objective whose output gradients are `g`.
    pub fn backward(&self, fwd: &Forward<T>, g: &OutputGrads<T>) -> Result<Grads<T>> {
        let mut grads = self.params.zero_grads();
        self.backward_into(fwd, g, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(&self, fwd: &Forward<T>, g: &OutputGrads<T>, grads: &mut Grads<T>) -> Result<()> {
        let c = &fwd.cache;
        let mut g_r = match &g.latent {
            Some(gl) => gl.clone(),
            None => Tensor::zeros(fwd.latent.n, fwd.latent.c, 1, 1),
        };
        if g_r.shape() != fwd.latent.shape() {
            return Err(Error::Shape("latent gradient shape mismatch".into()));
        }
        if let Some(gm) = &g.mask_logits {
            let (dec, mc) = match (&self.mask, &c.mask) {
                (Some(d), Some(mc)) => (d, mc),
                _ => return Err(Error::Config("mask gradient given to a single-task network".into())),
            };
            if Some(gm.shape()) != fwd.mask_logits.as_ref().map(Tensor::shape) {
                return Err(Error::Shape("mask gradient shape mismatch".into()));
            }
            g_r.add_assign(&dec.backward(&self.params, mc, gm, grads));
        }
        if let Some(gp) = &g.pose {
            if gp.data.len() != fwd.pose.data.len() {
                return Err(Error::Shape("pose gradient shape mismatch".into()));
            }
            g_r.add_assign(&self.pose.backward(&self.params, &c.pose, &fwd.pose, gp, grads));
        }
        let last = c.blocks.last().map(|b| {
            let (ph, pw) = b.pool;
            [b.cat_shape[0], b.cat_shape[1], b.cat_shape[2] / ph, b.cat_shape[3] / pw]
        });
        let mut gx = self.proj.backward(&self.params, &c.flat, &g_r, grads);
        if let Some([n, ch, h, w]) = last {
            gx = gx.reshaped(ch, h, w).expect("flat matches block output");
            debug_assert_eq!(gx.n, n);
        }
        for (blk, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            gx = blk.backward(&self.params, bc, &gx, grads);
        }
        if let (Some(e), Some(_)) = (&self.embed, &c.embedded) {
            let g_emb = avg_pool_backward(c.pooled_shape, &gx, self.cfg.input_pool.0, self.cfg.input_pool.1);
            e.backward(&c.input, &g_emb, grads);
        }
        Ok(())
    }
}
