//! CSI preprocessing: per-packet power normalization, real/imaginary
//! stacking, and the bias-free grouped point-wise embedding.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SUBCARRIERS: usize = 114;
pub const DEFAULT_PACKETS: usize = 20;
pub const DEFAULT_ANTENNAS: usize = 3;

/// Window of complex CSI, shape subcarriers x packets x antennas.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample<T> {
    subcarriers: usize,
    packets: usize,
    antennas: usize,
    values: Vec<Complex<T>>,
}

impl<T: Scalar> CsiSample<T> {
    /// `values` is row-major over (subcarrier, packet, antenna).
    pub fn new(
        subcarriers: usize,
        packets: usize,
        antennas: usize,
        values: Vec<Complex<T>>,
    ) -> Result<Self> {
        if values.len() != subcarriers * packets * antennas || values.is_empty() {
            return Err(Error::Shape(format!(
                "CSI {subcarriers}x{packets}x{antennas} needs {} values, got {}",
                subcarriers * packets * antennas,
                values.len()
            )));
        }
        if values.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::DegenerateInput("CSI contains NaN or infinity".into()));
        }
        let sample = Self {
            subcarriers,
            packets,
            antennas,
            values,
        };
        for t in 0..packets {
            for a in 0..antennas {
                if (0..subcarriers).all(|f| sample.get(f, t, a) == Complex::new(T::zero(), T::zero())) {
                    return Err(Error::DegenerateInput(format!(
                        "packet {t} on antenna {a} is all zero"
                    )));
                }
            }
        }
        Ok(sample)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.subcarriers, self.packets, self.antennas)
    }

    #[inline]
    pub fn index(&self, f: usize, t: usize, a: usize) -> usize {
        (f * self.packets + t) * self.antennas + a
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize, a: usize) -> Complex<T> {
        self.values[self.index(f, t, a)]
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    /// One packet (all subcarriers) of one antenna.
    pub fn packet(&self, t: usize, a: usize) -> Vec<Complex<T>> {
        (0..self.subcarriers).map(|f| self.get(f, t, a)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> CsiSample<U> {
        CsiSample {
            subcarriers: self.subcarriers,
            packets: self.packets,
            antennas: self.antennas,
            values: self
                .values
                .iter()
                .map(|c| Complex::new(U::of(c.re.as_f64()), U::of(c.im.as_f64())))
                .collect(),
        }
    }
}

/// Divides a packet by its mean magnitude so the result has mean magnitude 1.
pub fn normalize_packet<T: Scalar>(h: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    let total: T = h.iter().map(|c| c.norm()).sum();
    if !(total > T::zero()) {
        return Err(Error::DegenerateInput("all-zero CSI packet".into()));
    }
    let mean = total / T::of(h.len() as f64);
    Ok(h.iter().map(|c| c.unscale(mean)).collect())
}

/// Applies [`normalize_packet`] to every (packet, antenna) column.
pub fn normalize_sample<T: Scalar>(sample: &CsiSample<T>) -> Result<CsiSample<T>> {
    let mut out = sample.clone();
    for t in 0..sample.packets {
        for a in 0..sample.antennas {
            let norm = normalize_packet(&sample.packet(t, a))?;
            for (f, v) in norm.into_iter().enumerate() {
                let i = out.index(f, t, a);
                out.values[i] = v;
            }
        }
    }
    Ok(out)
}

/// Real tensor of shape subcarriers x packets x (2 * antennas); antenna `a`
/// occupies channel `2a` (real part) and `2a + 1` (imaginary part).
#[derive(Clone, Debug, PartialEq)]
pub struct StackedCsiTensor<T> {
    pub subcarriers: usize,
    pub packets: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> StackedCsiTensor<T> {
    #[inline]
    pub fn get(&self, f: usize, t: usize, c: usize) -> T {
        self.values[(f * self.packets + t) * self.channels + c]
    }

    /// Channel-major copy (`channels x subcarriers x packets`) for the network.
    pub fn to_chw(&self) -> Vec<T> {
        let plane = self.subcarriers * self.packets;
        let mut out = vec![T::zero(); plane * self.channels];
        for (pos, chunk) in self.values.chunks_exact(self.channels).enumerate() {
            for (c, &v) in chunk.iter().enumerate() {
                out[c * plane + pos] = v;
            }
        }
        out
    }
}

pub fn stack_real_imag<T: Scalar>(sample: &CsiSample<T>) -> StackedCsiTensor<T> {
    let mut values = Vec::with_capacity(sample.values.len() * 2);
    for c in &sample.values {
        values.push(c.re);
        values.push(c.im);
    }
    StackedCsiTensor {
        subcarriers: sample.subcarriers,
        packets: sample.packets,
        channels: 2 * sample.antennas,
        values,
    }
}

/// Inverse of [`stack_real_imag`].
pub fn unstack_real_imag<T: Scalar>(tensor: &StackedCsiTensor<T>) -> Result<CsiSample<T>> {
    if tensor.channels % 2 != 0 {
        return Err(Error::Shape(format!("odd channel count {}", tensor.channels)));
    }
    let values = tensor
        .values
        .chunks_exact(2)
        .map(|p| Complex::new(p[0], p[1]))
        .collect();
    CsiSample::new(tensor.subcarriers, tensor.packets, tensor.channels / 2, values)
}

/// How each embedding filter combines an antenna's real and imaginary parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingMode {
    /// One weight per filter applied to both parts: `w * (re + im)`.
    Shared,
    /// Separate weights: `w_re * re + w_im * im`.
    Split,
}

impl EmbeddingMode {
    pub fn weights_per_filter(self) -> usize {
        match self {
            EmbeddingMode::Shared => 1,
            EmbeddingMode::Split => 2,
        }
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(EmbeddingMode::Shared),
            "split" => Ok(EmbeddingMode::Split),
            other => Err(Error::Config(format!("unknown embedding mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Shared => "shared",
            EmbeddingMode::Split => "split",
        })
    }
}

/// Bias-free per-antenna filter weights, laid out
/// `[antenna][filter][weights_per_filter]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingWeights<T> {
    pub antennas: usize,
    pub filters: usize,
    pub mode: EmbeddingMode,
    pub weights: Vec<T>,
}

impl<T: Scalar> EmbeddingWeights<T> {
    pub fn new(antennas: usize, filters: usize, mode: EmbeddingMode, weights: Vec<T>) -> Result<Self> {
        let want = antennas * filters * mode.weights_per_filter();
        if weights.len() != want {
            return Err(Error::Shape(format!(
                "embedding needs {want} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Argument("embedding weights must be finite".into()));
        }
        Ok(Self {
            antennas,
            filters,
            mode,
            weights,
        })
    }

    #[inline]
    pub fn weight(&self, antenna: usize, filter: usize, part: usize) -> T {
        let per = self.mode.weights_per_filter();
        self.weights[(antenna * self.filters + filter) * per + part.min(per - 1)]
    }
}

/// Embedded CSI, shape subcarriers x packets x (filters * antennas); antenna
/// `a`, filter `i` lands in channel `a * filters + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedCsi<T> {
    pub subcarriers: usize,
    pub packets: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

/// Grouped 1x1 convolution over each antenna's (real, imaginary) pair.
pub fn rf_embed<T: Scalar>(
    tensor: &StackedCsiTensor<T>,
    w: &EmbeddingWeights<T>,
) -> Result<EmbeddedCsi<T>> {
    if tensor.channels != 2 * w.antennas {
        return Err(Error::Shape(format!(
            "embedding expects {} input channels for {} antenna groups, got {}",
            2 * w.antennas,
            w.antennas,
            tensor.channels
        )));
    }
    let out_c = w.filters * w.antennas;
    let mut values = Vec::with_capacity(tensor.subcarriers * tensor.packets * out_c);
    for pair in tensor.values.chunks_exact(tensor.channels) {
        for a in 0..w.antennas {
            let (re, im) = (pair[2 * a], pair[2 * a + 1]);
            for i in 0..w.filters {
                values.push(match w.mode {
                    EmbeddingMode::Shared => w.weight(a, i, 0) * re + w.weight(a, i, 0) * im,
                    EmbeddingMode::Split => w.weight(a, i, 0) * re + w.weight(a, i, 1) * im,
                });
            }
        }
    }
    Ok(EmbeddedCsi {
        subcarriers: tensor.subcarriers,
        packets: tensor.packets,
        channels: out_c,
        values,
    })
}
