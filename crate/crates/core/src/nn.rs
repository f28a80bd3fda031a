//! Minimal reverse-mode building blocks for the network: a 4-D batch tensor,
//! a named parameter store, and layers with hand-written backward passes.
//!
//! Layers never own weights. They hold slot indices into a [`ParamStore`],
//! read weights from it in `forward`, and accumulate into a matching
//! [`Grads`] in `backward`. The caller keeps whatever activations a layer
//! needs for its backward pass.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::scalar::{matmul, Scalar};

/// Dense `n x c x h x w` tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    /// Same data viewed as `n x (c*h*w) x 1 x 1`.
    pub fn flattened(mut self) -> Self {
        self.c *= self.h * self.w;
        self.h = 1;
        self.w = 1;
        self
    }

    pub fn reshaped(mut self, c: usize, h: usize, w: usize) -> Result<Self> {
        if c * h * w != self.item_len() {
            return Err(Error::Shape(format!(
                "cannot view {}x{}x{} as {c}x{h}x{w}",
                self.c, self.h, self.w
            )));
        }
        self.c = c;
        self.h = h;
        self.w = w;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch items `indices` into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Self {
            n: indices.len(),
            data,
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            debug_assert_eq!((p.n, p.h, p.w), (n, h, w));
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor { n, c, h, w, data }
}

/// Splits a channel-concatenated gradient back into per-part tensors.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let plane = g.h * g.w;
    let mut out: Vec<Tensor<T>> = channels
        .iter()
        .map(|&c| Tensor::zeros(g.n, c, g.h, g.w))
        .collect();
    for i in 0..g.n {
        let src = g.item(i);
        let mut off = 0;
        for (part, &c) in out.iter_mut().zip(channels) {
            part.item_mut(i).copy_from_slice(&src[off..off + c * plane]);
            off += c * plane;
        }
    }
    out
}

/// Named, shaped parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// All trainable tensors of a model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        self.params.push(Param { name, shape, value });
        self.params.len() - 1
    }

    /// Uniform `[-bound, bound]` initialization.
    pub fn add_uniform<R: Rng>(&mut self, name: String, shape: Vec<usize>, bound: f64, rng: &mut R) -> usize {
        let len = shape.iter().product();
        let value = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..len).map(|_| T::of(dist.sample(rng))).collect()
        } else {
            vec![T::zero(); len]
        };
        self.add(name, shape, value)
    }

    pub fn get(&self, slot: usize) -> &[T] {
        &self.params[slot].value
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.params[slot].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            slots: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &[Param<T>]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Load(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Load(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.value.clone_from(&theirs.value);
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub slots: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn slot_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.slots[slot]
    }

    pub fn add_scaled(&mut self, other: &Grads<T>, s: T) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y * s;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.slots.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .map(|v| *v * *v)
            .sum::<T>()
            .sqrt()
    }

    /// Index of the first slot holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.slots.iter().position(|s| s.iter().any(|v| !v.is_finite()))
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(LEAKY_SLOPE)
    }
}

pub fn leaky_forward<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(leaky)
}

/// Gradient through the leaky rectifier given its pre-activation `z`.
pub fn leaky_backward<T: Scalar>(z: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = T::of(LEAKY_SLOPE);
    Tensor {
        data: z
            .data
            .iter()
            .zip(&g.data)
            .map(|(&z, &g)| if z > T::zero() { g } else { g * s })
            .collect(),
        ..*g
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    pub fn new(k: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kh: k.0,
            kw: k.1,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        }
    }

    /// Output size of a forward convolution over an `h x w` input.
    pub fn conv_out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unfolds `x` (`c x h x w`) into `(c*kh*kw) x (ho*wo)` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, win: &Window, ho: usize, wo: usize, cols: &mut [T]) {
    let plane = ho * wo;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..win.kh {
            for j in 0..win.kw {
                let row = ((ch * win.kh + i) * win.kw + j) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * win.sh + i) as isize - win.ph as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * win.sw + j) as isize - win.pw as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, win: &Window, ho: usize, wo: usize, x: &mut [T]) {
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for i in 0..win.kh {
            for j in 0..win.kw {
                let row = ((ch * win.kh + i) * win.kw + j) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * win.sh + i) as isize - win.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * win.sw + j) as isize - win.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// 2-D convolution, weights `cout x cin x kh x kw`, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        win: Window,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * win.kh * win.kw;
        let weight = store.add_uniform(format!("{name}.weight"), vec![cout, cin, win.kh, win.kw], he_bound(fan_in), rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), vec![cout], 0.0, rng));
        Self { weight, bias, cin, cout, win }
    }

    pub fn param_count(cin: usize, cout: usize, kh: usize, kw: usize, bias: bool) -> usize {
        cout * cin * kh * kw + if bias { cout } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.win.conv_out(x.h, x.w);
        let k = self.cin * self.win.kh * self.win.kw;
        let plane = ho * wo;
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        let w = ps.get(self.weight);
        let mut cols = if self.win.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
        for i in 0..x.n {
            let src: &[T] = if self.win.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), x.c, x.h, x.w, &self.win, ho, wo, &mut cols);
                &cols
            };
            let out = y.item_mut(i);
            if let Some(b) = self.bias {
                for (o, &bv) in out.chunks_exact_mut(plane).zip(ps.get(b)) {
                    o.fill(bv);
                }
            }
            matmul(self.cout, k, plane, w, false, src, false, T::one(), out);
        }
        y
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let (ho, wo) = (gy.h, gy.w);
        let k = self.cin * self.win.kh * self.win.kw;
        let plane = ho * wo;
        let w = ps.get(self.weight);
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let pointwise = self.win.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
        let mut gcols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
        for i in 0..x.n {
            let g = gy.item(i);
            if let Some(b) = self.bias {
                for (gb, row) in grads.slot_mut(b).iter_mut().zip(g.chunks_exact(plane)) {
                    *gb += row.iter().copied().sum::<T>();
                }
            }
            if pointwise {
                matmul(self.cout, plane, k, g, false, x.item(i), true, T::one(), grads.slot_mut(self.weight));
                matmul(k, self.cout, plane, w, true, g, false, T::zero(), gx.item_mut(i));
            } else {
                im2col(x.item(i), x.c, x.h, x.w, &self.win, ho, wo, &mut cols);
                matmul(self.cout, plane, k, g, false, &cols, true, T::one(), grads.slot_mut(self.weight));
                matmul(k, self.cout, plane, w, true, g, false, T::zero(), &mut gcols);
                col2im(&gcols, x.c, x.h, x.w, &self.win, ho, wo, gx.item_mut(i));
            }
        }
        gx
    }
}

/// Transposed convolution, weights `cin x cout x kh x kw`, with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
    pub out_pad: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        win: Window,
        out_pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * win.kh * win.kw / (win.sh * win.sw)).max(1);
        let weight = store.add_uniform(format!("{name}.weight"), vec![cin, cout, win.kh, win.kw], he_bound(fan_in), rng);
        let bias = store.add_uniform(format!("{name}.bias"), vec![cout], 0.0, rng);
        Self { weight, bias, cin, cout, win, out_pad }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.win.sh + self.win.kh + self.out_pad.0 - 2 * self.win.ph,
            (w - 1) * self.win.sw + self.win.kw + self.out_pad.1 - 2 * self.win.pw,
        )
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (ho, wo) = self.out_size(x.h, x.w);
        let k = self.cout * self.win.kh * self.win.kw;
        let plane = x.h * x.w;
        let w = ps.get(self.weight);
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        let mut cols = vec![T::zero(); k * plane];
        for i in 0..x.n {
            matmul(k, self.cin, plane, w, true, x.item(i), false, T::zero(), &mut cols);
            let out = y.item_mut(i);
            for (o, &bv) in out.chunks_exact_mut(ho * wo).zip(ps.get(self.bias)) {
                o.fill(bv);
            }
            col2im(&cols, self.cout, ho, wo, &self.win, x.h, x.w, out);
        }
        y
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let k = self.cout * self.win.kh * self.win.kw;
        let plane = x.h * x.w;
        let w = ps.get(self.weight);
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut gcols = vec![T::zero(); k * plane];
        let oplane = gy.h * gy.w;
        for i in 0..x.n {
            let g = gy.item(i);
            for (gb, row) in grads.slot_mut(self.bias).iter_mut().zip(g.chunks_exact(oplane)) {
                *gb += row.iter().copied().sum::<T>();
            }
            im2col(g, self.cout, gy.h, gy.w, &self.win, x.h, x.w, &mut gcols);
            matmul(self.cin, plane, k, x.item(i), false, &gcols, true, T::one(), grads.slot_mut(self.weight));
            matmul(self.cin, k, plane, w, false, &gcols, false, T::zero(), gx.item_mut(i));
        }
        gx
    }
}

/// Fully connected layer over flattened items: `y = W x + b`, `W` is `out x in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), vec![fout, fin], he_bound(fin), rng);
        let bias = store.add_uniform(format!("{name}.bias"), vec![fout], 0.0, rng);
        Self { weight, bias, fin, fout }
    }

    pub fn param_count(fin: usize, fout: usize) -> usize {
        fin * fout + fout
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.item_len(), self.fin);
        let mut y = Tensor::zeros(x.n, self.fout, 1, 1);
        let b = ps.get(self.bias);
        for row in y.data.chunks_exact_mut(self.fout) {
            row.copy_from_slice(b);
        }
        // Y (n x out) = X (n x in) * W^T
        matmul(x.n, self.fin, self.fout, &x.data, false, ps.get(self.weight), true, T::one(), &mut y.data);
        y
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let gb = grads.slot_mut(self.bias);
        for row in gy.data.chunks_exact(self.fout) {
            for (a, &g) in gb.iter_mut().zip(row) {
                *a += g;
            }
        }
        // dW (out x in) += G^T (out x n) * X (n x in)
        matmul(self.fout, x.n, self.fin, &gy.data, true, &x.data, false, T::one(), grads.slot_mut(self.weight));
        let mut gx = Tensor { data: vec![T::zero(); x.data.len()], ..*x };
        matmul(x.n, self.fout, self.fin, &gy.data, false, ps.get(self.weight), false, T::zero(), &mut gx.data);
        gx
    }
}

/// Non-overlapping average pooling with floor semantics.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    if ph == 1 && pw == 1 {
        return x.clone();
    }
    let (ho, wo) = (x.h / ph, x.w / pw);
    let inv = T::one() / T::of((ph * pw) as f64);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    for (src, dst) in x.data.chunks_exact(x.h * x.w).zip(y.data.chunks_exact_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for i in 0..ph {
                    for j in 0..pw {
                        acc += src[(oy * ph + i) * x.w + ox * pw + j];
                    }
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    y
}

pub fn avg_pool_backward<T: Scalar>(x_shape: [usize; 4], gy: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    if ph == 1 && pw == 1 {
        return gy.clone();
    }
    let [n, c, h, w] = x_shape;
    let inv = T::one() / T::of((ph * pw) as f64);
    let mut gx = Tensor::zeros(n, c, h, w);
    for (dst, src) in gx.data.chunks_exact_mut(h * w).zip(gy.data.chunks_exact(gy.h * gy.w)) {
        for oy in 0..gy.h {
            for ox in 0..gy.w {
                let g = src[oy * gy.w + ox] * inv;
                for i in 0..ph {
                    for j in 0..pw {
                        dst[(oy * ph + i) * w + ox * pw + j] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Mean over the spatial plane: `n x c x 1 x 1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let plane = x.h * x.w;
    let inv = T::one() / T::of(plane as f64);
    Tensor {
        n: x.n,
        c: x.c,
        h: 1,
        w: 1,
        data: x
            .data
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect(),
    }
}

/// Repeats a `n x c x 1 x 1` tensor over an `h x w` plane.
pub fn broadcast_plane<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.data.len() * h * w);
    for &v in &x.data {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor { n: x.n, c: x.c, h, w, data }
}

/// Sums each plane: adjoint of [`broadcast_plane`].
pub fn sum_plane<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    Tensor {
        n: g.n,
        c: g.c,
        h: 1,
        w: 1,
        data: g
            .data
            .chunks_exact(g.h * g.w)
            .map(|p| p.iter().copied().sum())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, s: [usize; 4]) -> Tensor<f64> {
        Tensor::from_vec(s[0], s[1], s[2], s[3], (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct-definition convolution used as an oracle.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, win: &Window) -> Tensor<f64> {
        let (ho, wo) = win.conv_out(x.h, x.w);
        let mut y = Tensor::zeros(x.n, cout, ho, wo);
        for n in 0..x.n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.get(o).copied().unwrap_or(0.0);
                        for c in 0..x.c {
                            for i in 0..win.kh {
                                for j in 0..win.kw {
                                    let iy = (oy * win.sh + i) as isize - win.ph as isize;
                                    let ix = (ox * win.sw + j) as isize - win.pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += w[((o * x.c + c) * win.kh + i) * win.kw + j]
                                            * x.data[((n * x.c + c) * x.h + iy as usize) * x.w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data[((n * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for win in [
            Window::new((3, 3), (1, 1), (1, 1)),
            Window::new((1, 7), (1, 1), (0, 3)),
            Window::new((3, 3), (2, 1), (0, 1)),
            Window::new((1, 1), (1, 1), (0, 0)),
        ] {
            let mut ps = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut ps, "c", 3, 4, win, true, &mut rng);
            ps.get_mut(conv.bias.unwrap()).iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = rand_tensor(&mut rng, [2, 3, 7, 9]);
            let y = conv.forward(&ps, &x);
            let want = conv_naive(&x, ps.get(conv.weight), ps.get(conv.bias.unwrap()), 4, &win);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks `<gy, J dx> == <J^T gy, dx>` and weight gradients by finite differences.
    fn check_layer(
        ps: &mut ParamStore<f64>,
        x: &Tensor<f64>,
        fwd: &dyn Fn(&ParamStore<f64>, &Tensor<f64>) -> Tensor<f64>,
        bwd: &dyn Fn(&ParamStore<f64>, &Tensor<f64>, &Tensor<f64>, &mut Grads<f64>) -> Tensor<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = fwd(ps, x);
        let gy = rand_tensor(rng, y.shape());
        let mut grads = ps.zero_grads();
        let gx = bwd(ps, x, &gy, &mut grads);
        let dx = rand_tensor(rng, x.shape());
        let h = 1e-6;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for k in 0..x.data.len() {
            xp.data[k] += h * dx.data[k];
            xm.data[k] -= h * dx.data[k];
        }
        let num = (dot(&fwd(ps, &xp).data, &gy.data) - dot(&fwd(ps, &xm).data, &gy.data)) / (2.0 * h);
        assert!((num - dot(&gx.data, &dx.data)).abs() < 1e-6 * (1.0 + num.abs()));
        for slot in 0..ps.params().len() {
            let dir: Vec<f64> = (0..ps.get(slot).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base = ps.get(slot).to_vec();
            let eval = |ps: &mut ParamStore<f64>, s: f64| {
                for (v, (b, d)) in ps.get_mut(slot).iter_mut().zip(base.iter().zip(&dir)) {
                    *v = b + s * d;
                }
                dot(&fwd(ps, x).data, &gy.data)
            };
            let num = (eval(ps, h) - eval(ps, -h)) / (2.0 * h);
            eval(ps, 0.0);
            let ana = dot(&grads.slots[slot], &dir);
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "slot {slot}: {ana} vs {num}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for win in [Window::new((3, 3), (2, 2), (1, 1)), Window::new((7, 1), (1, 1), (3, 0)), Window::new((1, 1), (1, 1), (0, 0))] {
            let mut ps = ParamStore::new();
            let conv = Conv2d::new(&mut ps, "c", 2, 3, win, true, &mut rng);
            let x = rand_tensor(&mut rng, [2, 2, 6, 5]);
            check_layer(&mut ps, &x, &|p, x| conv.forward(p, x), &|p, x, g, gr| conv.backward(p, x, g, gr), &mut rng);
        }
    }

    #[test]
    fn transposed_conv_sizes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let t = ConvTranspose2d::new(&mut ps, "t", 2, 3, Window::new((5, 5), (2, 2), (2, 2)), (1, 1), &mut rng);
        assert_eq!(t.out_size(4, 4), (8, 8));
        assert_eq!(t.out_size(57, 57), (114, 114));
        let x = rand_tensor(&mut rng, [2, 2, 4, 3]);
        check_layer(&mut ps, &x, &|p, x| t.forward(p, x), &|p, x, g, gr| t.backward(p, x, g, gr), &mut rng);
        let t0 = ConvTranspose2d::new(&mut ps, "u", 3, 1, Window::new((5, 5), (2, 2), (2, 2)), (0, 0), &mut rng);
        assert_eq!(t0.out_size(8, 8), (15, 15));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // With shared weights, <conv(y), x> == <y, convT(x)> (biases zero).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let win = Window::new((5, 5), (2, 2), (2, 2));
        let mut ps = ParamStore::new();
        let t = ConvTranspose2d::new(&mut ps, "t", 3, 2, win, (1, 1), &mut rng);
        let c = Conv2d::new(&mut ps, "c", 2, 3, win, false, &mut rng);
        let wt = ps.get(t.weight).to_vec();
        ps.get_mut(c.weight).copy_from_slice(&wt);
        let x = rand_tensor(&mut rng, [1, 3, 4, 4]);
        let y = rand_tensor(&mut rng, [1, 2, 8, 8]);
        let lhs = dot(&c.forward(&ps, &y).data, &x.data);
        let rhs = dot(&y.data, &t.forward(&ps, &x).data);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let l = Linear::new(&mut ps, "l", 6, 4, &mut rng);
        let x = rand_tensor(&mut rng, [3, 6, 1, 1]);
        check_layer(&mut ps, &x, &|p, x| l.forward(p, x), &|p, x, g, gr| l.backward(p, x, g, gr), &mut rng);
    }

    #[test]
    fn pooling_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, [2, 3, 7, 5]);
        let y = avg_pool(&x, 2, 2);
        assert_eq!(y.shape(), [2, 3, 3, 2]);
        let gy = rand_tensor(&mut rng, y.shape());
        let gx = avg_pool_backward(x.shape(), &gy, 2, 2);
        assert!((dot(&y.data, &gy.data) - dot(&x.data, &gx.data)).abs() < 1e-12);
        let g = global_avg_pool(&x);
        let gb = rand_tensor(&mut rng, [2, 3, 7, 5]);
        let s = sum_plane(&gb);
        let b = broadcast_plane(&g, 7, 5);
        assert_eq!(b.shape(), x.shape());
        assert!((dot(&b.data, &gb.data) - dot(&g.data, &s.data)).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, [2, 1, 3, 3]);
        let b = rand_tensor(&mut rng, [2, 2, 3, 3]);
        let cat = concat_channels(&[&a, &b]);
        let parts = split_channels(&cat, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
