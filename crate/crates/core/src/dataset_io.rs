//! Binary dataset (`HNDF`) and checkpoint (`HNDW`) files.
//!
//! Both formats are little-endian and start with a 4-byte magic and a `u32`
//! version. Readers reject versions they do not know.
//!
//! Dataset layout after the version:
//!
//! ```text
//! u32 F, u32 T, u32 Ant, u32 joints (21), u32 mask side, u64 sample count,
//! f64 cm per unit,
//! u32 domain count, per domain: u32 id, 3 x f64 offset (m), u64 env seed,
//! u32 gesture count, per gesture: u32 id, u16 name length, UTF-8 name,
//! per sample: F*T*Ant x (f32 re, f32 im) in (f, t, a) order,
//!             mask rows of ceil(side / 8) bytes, MSB first, padding bits zero,
//!             63 x f32 pose, u32 domain id, u32 gesture id (0xFFFFFFFF = none)
//! ```
//!
//! Checkpoint layout after the version:
//!
//! ```text
//! u32 header length, UTF-8 `key = value` header,
//! u32 tensor count, per tensor: u16 name length, UTF-8 name, u32 rank,
//!                               rank x u32 dims, f32 values
//! ```

use std::path::Path;

use num_complex::Complex;

use crate::csi_processing::CsiSample;
use crate::error::{Error, Result};
use crate::hand_model::{HandPose, NUM_JOINTS};
use crate::kv::KvConfig;
use crate::losses::LossWeights;
use crate::mask::HandMask;
use crate::network::{HandNet, NetworkConfig};
use crate::nn::Param;
use crate::synth_sim::{DomainSpec, LabeledSample};

pub const DATASET_MAGIC: &[u8; 4] = b"HNDF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HNDW";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_GESTURE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GestureEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub subcarriers: usize,
    pub packets: usize,
    pub antennas: usize,
    pub mask_side: usize,
    pub cm_per_unit: f64,
    pub domains: Vec<DomainSpec>,
    pub gestures: Vec<GestureEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<LabeledSample>,
}

fn mask_row_bytes(side: usize) -> usize {
    side.div_ceil(8)
}

impl Dataset {
    pub fn new(meta: DatasetMeta, samples: Vec<LabeledSample>) -> Result<Self> {
        let d = Self { meta, samples };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the header.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if !(m.cm_per_unit > 0.0) {
            return Err(Error::Argument("cm per unit must be positive".into()));
        }
        for (i, a) in m.domains.iter().enumerate() {
            if m.domains[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::Argument(format!("duplicate domain id {}", a.id)));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.csi.shape() != (m.subcarriers, m.packets, m.antennas) {
                return Err(Error::Shape(format!("sample {i}: CSI shape {:?}", s.csi.shape())));
            }
            if s.mask.side() != m.mask_side {
                return Err(Error::Shape(format!("sample {i}: mask side {}", s.mask.side())));
            }
            if s.cm_per_unit != m.cm_per_unit {
                return Err(Error::Argument(format!("sample {i}: scale differs from the header")));
            }
            if !m.domains.iter().any(|d| d.id == s.domain) {
                return Err(Error::Argument(format!("sample {i}: unknown domain {}", s.domain)));
            }
            if let Some(g) = s.gesture {
                if !m.gestures.iter().any(|e| e.id == g) {
                    return Err(Error::Argument(format!("sample {i}: unknown gesture {g}")));
                }
            }
        }
        Ok(())
    }

    /// Same header, chosen samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn filter_domain(&self, id: u32) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples.iter().filter(|s| s.domain == id).cloned().collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let m = &self.meta;
        let mut w = Vec::new();
        w.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut w, DATASET_VERSION);
        for v in [m.subcarriers, m.packets, m.antennas, NUM_JOINTS, m.mask_side] {
            put_u32(&mut w, dim_u32(v)?);
        }
        w.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        w.extend_from_slice(&m.cm_per_unit.to_le_bytes());
        put_u32(&mut w, dim_u32(m.domains.len())?);
        for d in &m.domains {
            put_u32(&mut w, d.id);
            for v in d.offset {
                w.extend_from_slice(&v.to_le_bytes());
            }
            w.extend_from_slice(&d.env_seed.to_le_bytes());
        }
        put_u32(&mut w, dim_u32(m.gestures.len())?);
        for g in &m.gestures {
            put_u32(&mut w, g.id);
            put_str(&mut w, &g.name)?;
        }
        let row = mask_row_bytes(m.mask_side);
        for s in &self.samples {
            for c in s.csi.values() {
                put_f32(&mut w, c.re);
                put_f32(&mut w, c.im);
            }
            for r in 0..m.mask_side {
                let mut bytes = vec![0u8; row];
                for c in 0..m.mask_side {
                    if s.mask.get(r, c) {
                        bytes[c / 8] |= 0x80 >> (c % 8);
                    }
                }
                w.extend_from_slice(&bytes);
            }
            for v in s.pose.to_flat() {
                put_f32(&mut w, v);
            }
            put_u32(&mut w, s.domain);
            put_u32(&mut w, s.gesture.unwrap_or(NO_GESTURE));
        }
        Ok(w)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let subcarriers = r.u32("subcarrier count")? as usize;
        let packets = r.u32("packet count")? as usize;
        let antennas = r.u32("antenna count")? as usize;
        let joints = r.u32("joint count")? as usize;
        if joints != NUM_JOINTS {
            return Err(r.fail_back(4, format!("expected {NUM_JOINTS} joints, header says {joints}")));
        }
        let mask_side = r.u32("mask side")? as usize;
        if subcarriers == 0 || packets == 0 || antennas == 0 || mask_side == 0 {
            return Err(r.fail("zero dimension in header"));
        }
        let count = r.u64("sample count")?;
        let cm_per_unit = r.f64("cm per unit")?;
        if !(cm_per_unit > 0.0) {
            return Err(r.fail_back(8, "cm per unit must be positive"));
        }
        let nd = r.u32("domain count")?;
        let mut domains = Vec::new();
        for _ in 0..nd {
            let id = r.u32("domain id")?;
            let offset = [r.f64("domain offset")?, r.f64("domain offset")?, r.f64("domain offset")?];
            let env_seed = r.u64("domain seed")?;
            domains.push(DomainSpec { id, offset, env_seed });
        }
        let ng = r.u32("gesture count")?;
        let mut gestures = Vec::new();
        for _ in 0..ng {
            let id = r.u32("gesture id")?;
            let name = r.string("gesture name")?;
            gestures.push(GestureEntry { id, name });
        }
        let meta = DatasetMeta {
            subcarriers,
            packets,
            antennas,
            mask_side,
            cm_per_unit,
            domains,
            gestures,
        };
        let cells = subcarriers * packets * antennas;
        let row = mask_row_bytes(mask_side);
        let record_len = cells as u64 * 8 + (row * mask_side) as u64 + 63 * 4 + 8;
        if count.saturating_mul(record_len) > r.remaining() as u64 {
            // Report the first record that cannot be complete.
            let whole = r.remaining() as u64 / record_len;
            r.record = Some(whole as usize);
            r.pos += (whole * record_len) as usize;
            return Err(r.fail(format!("truncated: header declares {count} samples, data holds {whole}")));
        }
        let mut samples = Vec::with_capacity(count as usize);
        for i in 0..count as usize {
            r.record = Some(i);
            let start = r.pos;
            let mut values = Vec::with_capacity(cells);
            for _ in 0..cells {
                values.push(Complex::new(r.f32("CSI")?, r.f32("CSI")?));
            }
            if values.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
                r.pos = start;
                return Err(r.fail("non-finite CSI value"));
            }
            let csi = CsiSample::new(subcarriers, packets, antennas, values)?;
            let mut mask = HandMask::zeros(mask_side);
            for y in 0..mask_side {
                let at = r.pos;
                let bytes = r.take(row, "mask row")?;
                for x in 0..row * 8 {
                    let on = bytes[x / 8] & (0x80 >> (x % 8)) != 0;
                    if x >= mask_side {
                        if on {
                            r.pos = at;
                            return Err(r.fail(format!("mask row {y} has non-zero padding bits")));
                        }
                    } else if on {
                        mask.set(y, x, true);
                    }
                }
            }
            let pose_at = r.pos;
            let mut flat = [0f32; 63];
            for v in flat.iter_mut() {
                *v = r.f32("pose")?;
            }
            if flat.iter().any(|v| !v.is_finite()) {
                r.pos = pose_at;
                return Err(r.fail("non-finite pose coordinate"));
            }
            let pose = HandPose::from_flat(&flat)?;
            let domain = r.u32("domain id")?;
            if !meta.domains.iter().any(|d| d.id == domain) {
                return Err(r.fail_back(4, format!("domain {domain} is not in the domain table")));
            }
            let g = r.u32("gesture id")?;
            let gesture = (g != NO_GESTURE).then_some(g);
            if let Some(g) = gesture {
                if !meta.gestures.iter().any(|e| e.id == g) {
                    return Err(r.fail_back(4, format!("gesture {g} is not in the gesture table")));
                }
            }
            samples.push(LabeledSample {
                csi,
                mask,
                pose,
                domain,
                gesture,
                cm_per_unit,
            });
        }
        r.record = None;
        if r.remaining() != 0 {
            return Err(r.fail(format!("{} trailing bytes after the last sample", r.remaining())));
        }
        let d = Dataset { meta, samples };
        d.validate().map_err(|e| Error::Parse {
            offset: 0,
            record: None,
            message: e.to_string(),
        })?;
        Ok(d)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Named `f32` tensors with a text header.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: KvConfig,
    pub tensors: Vec<Param<f32>>,
}

impl Checkpoint {
    /// Header holds `kind = network`, the network config under `network.`,
    /// the loss weights under `loss.`, the seed and the step count.
    pub fn from_network(net: &HandNet<f32>, weights: &LossWeights, seed: u64, steps: u64) -> Self {
        let mut header = KvConfig::new();
        header.set("kind", "network");
        header.set("seed", seed);
        header.set("steps", steps);
        header.merge_prefixed("network", &net.config().to_kv());
        header.merge_prefixed("loss", &weights.to_kv());
        Self {
            header,
            tensors: net.params().params().iter().chain(net.buffers().params()).cloned().collect(),
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        NetworkConfig::from_kv(&self.header.section("network")).map_err(|e| Error::Load(e.to_string()))
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::from_kv(&self.header.section("loss")).map_err(|e| Error::Load(e.to_string()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.header.parse_req("seed").map_err(|e| Error::Load(e.to_string()))
    }

    pub fn steps(&self) -> Result<u64> {
        self.header.parse_req("steps").map_err(|e| Error::Load(e.to_string()))
    }

    /// Rebuilds the network; every tensor must match the config's layout.
    pub fn to_network(&self) -> Result<HandNet<f32>> {
        if self.header.get("kind") != Some("network") {
            return Err(Error::Load("checkpoint does not hold a network".into()));
        }
        let mut net = HandNet::new(&self.network_config()?, self.seed()?)?;
        let (buffers, params): (Vec<Param<f32>>, Vec<Param<f32>>) =
            self.tensors.iter().cloned().partition(|p| net.buffers().by_name(&p.name).is_some());
        net.params_mut().load_from(&params)?;
        net.buffers_mut().load_from(&buffers)?;
        Ok(net)
    }

    pub fn tensor(&self, name: &str) -> Option<&Param<f32>> {
        self.tensors.iter().find(|p| p.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        let text = self.header.to_text();
        put_u32(&mut w, dim_u32(text.len())?);
        w.extend_from_slice(text.as_bytes());
        put_u32(&mut w, dim_u32(self.tensors.len())?);
        for (i, p) in self.tensors.iter().enumerate() {
            if self.tensors[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Argument(format!("duplicate tensor `{}`", p.name)));
            }
            if p.shape.iter().product::<usize>() != p.value.len() {
                return Err(Error::Shape(format!("tensor `{}` shape {:?} vs {} values", p.name, p.shape, p.value.len())));
            }
            put_str(&mut w, &p.name)?;
            put_u32(&mut w, dim_u32(p.shape.len())?);
            for &d in &p.shape {
                put_u32(&mut w, dim_u32(d)?);
            }
            for &v in &p.value {
                put_f32(&mut w, v);
            }
        }
        Ok(w)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let len = r.u32("header length")? as usize;
        let at = r.pos;
        let raw = r.take(len, "header")?;
        let text = std::str::from_utf8(raw).map_err(|_| Error::Parse {
            offset: at as u64,
            record: None,
            message: "header is not UTF-8".into(),
        })?;
        let header = KvConfig::parse(text).map_err(|e| Error::Parse {
            offset: at as u64,
            record: None,
            message: e.to_string(),
        })?;
        let n = r.u32("tensor count")? as usize;
        let mut tensors: Vec<Param<f32>> = Vec::new();
        for i in 0..n {
            r.record = Some(i);
            let at = r.pos;
            let name = r.string("tensor name")?;
            if tensors.iter().any(|p| p.name == name) {
                r.pos = at;
                return Err(r.fail(format!("duplicate tensor `{name}`")));
            }
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(r.fail_back(4, format!("tensor rank {rank} is implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dim")? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
            if len.saturating_mul(4) > r.remaining() {
                return Err(r.fail(format!("tensor `{name}` is truncated")));
            }
            let mut value = Vec::with_capacity(len);
            for _ in 0..len {
                value.push(r.f32("tensor value")?);
            }
            tensors.push(Param { name, shape, value });
        }
        r.record = None;
        if r.remaining() != 0 {
            return Err(r.fail(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit the file format")))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(w: &mut Vec<u8>, v: f32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Argument(format!("name too long: {s}")))?;
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: Option<usize>,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, record: None }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            record: self.record,
            message: message.into(),
        }
    }

    /// Error positioned at the start of a field just consumed.
    fn fail_back(&self, width: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: (self.pos - width) as u64,
            record: self.record,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(format!("truncated {what}: need {n} bytes, {} left", self.remaining())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            offset: at as u64,
            record: self.record,
            message: format!("{what} is not UTF-8"),
        })
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(self.fail_back(4, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(want).unwrap_or("?"))));
        }
        Ok(())
    }

    fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v == 0 || v > supported {
            return Err(self.fail_back(4, format!("unsupported format version {v} (reader knows up to {supported})")));
        }
        Ok(())
    }
}
