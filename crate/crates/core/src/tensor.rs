//! Dense row-major tensors and the handful of kernels the networks need.
//!
//! Everything here is single-sample: feature maps are `[C, H, W]`, weights
//! are `[Cout, Cin, K, K]`, vectors are `[D]`. Batches are loops.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Floating point element type. Implemented for `f32` (the working type)
/// and `f64` (used for finite-difference checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping buffers of the
    /// given shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64c(v)
}

/// Boundary handling for 3x3 convolutions and resampling kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[1], vec![v])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect())
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = rng.sample(StandardNormal);
            T::from_f64c(v * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `[C, H, W]` dimensions; panics on other ranks.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C, H, W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Sum accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64c()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64c();
                x * x
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64c() * b.to_f64c())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64c().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64c() - b.to_f64c()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a `[C, H, W]` tensor as a flat slice.
    pub fn channel(&self, c: usize) -> &[T] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let (_, h, w) = self.chw();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Crop of a `[C, H, W]` tensor excluding `border` pixels on every side.
    pub fn crop_interior(&self, border: usize) -> Self {
        let (_, h, w) = self.chw();
        assert!(2 * border < h && 2 * border < w, "border {border} too large for {h}x{w}");
        self.crop(border, border, h - 2 * border, w - 2 * border)
    }

    /// Window `[y0, y0 + nh) x [x0, x0 + nw)` of a `[C, H, W]` tensor.
    pub fn crop(&self, y0: usize, x0: usize, nh: usize, nw: usize) -> Self {
        let (c, h, w) = self.chw();
        assert!(y0 + nh <= h && x0 + nw <= w, "window {nh}x{nw} at ({y0}, {x0}) outside {h}x{w}");
        let mut out = Vec::with_capacity(c * nh * nw);
        for ch in 0..c {
            for y in y0..y0 + nh {
                let row = ch * h * w + y * w;
                out.extend_from_slice(&self.data[row + x0..row + x0 + nw]);
            }
        }
        Self::new(&[c, nh, nw], out)
    }

    /// Part of a `[C, H, W]` grid that keeps content after an integer shift
    /// by `(dx, dy)`, less `border` on every side.
    pub fn crop_shift_overlap(&self, dx: isize, dy: isize, border: usize) -> Self {
        let (_, h, w) = self.chw();
        let x0 = dx.max(0) as usize + border;
        let y0 = dy.max(0) as usize + border;
        let nw = (w as isize - dx.abs()) as usize - 2 * border;
        let nh = (h as isize - dy.abs()) as usize - 2 * border;
        self.crop(y0, x0, nh, nw)
    }

    /// Integer roll of a `[C, H, W]` tensor: output(y, x) = input(y - dy, x - dx).
    pub fn roll(&self, dy: isize, dx: isize) -> Self {
        let (c, h, w) = self.chw();
        let mut out = Self::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                    out.data[ch * h * w + y * w + x] = self.data[ch * h * w + sy * w + sx];
                }
            }
        }
        out
    }
}

/// General matrix product on row-major 2-D tensors with optional transposes:
/// `op(a) [m, k] x op(b) [k, n] -> [m, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Tensor<T> {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (m, k) = if trans_a {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (k2, n) = if trans_b {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(&a.data, a.shape[1], trans_a, &b.data, b.shape[1], trans_b, m, k, n, T::zero(), &mut out.data);
    out
}

/// `c = op(a) * op(b) + beta * c` on raw row-major buffers. `lda`/`ldb` are the
/// row lengths of the stored (untransposed) matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Real>(
    a: &[T],
    lda: usize,
    trans_a: bool,
    b: &[T],
    ldb: usize,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
    c: &mut [T],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable buffer.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Unfold a `[C, H, W]` map into `[C*K*K, H*W]` columns for a stride-1,
/// "same"-padded KxK convolution.
pub fn im2col<T: Real>(x: &Tensor<T>, k: usize, pad: Padding) -> Vec<T> {
    let (c, h, w) = x.chw();
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        let src = x.channel(ch);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let oy = ky as isize - r;
                let ox = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let d = &mut dst[y * w..(y + 1) * w];
                    match pad {
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                            let x0 = (-ox).max(0) as usize;
                            let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                            if x0 < x1 {
                                let s0 = (x0 as isize + ox) as usize;
                                d[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                            }
                        }
                        Padding::Circular => {
                            let srow = &src[wrap(sy, h) * w..(wrap(sy, h) + 1) * w];
                            for (xx, dv) in d.iter_mut().enumerate() {
                                *dv = srow[wrap(xx as isize + ox, w)];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` map.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: Padding) -> Tensor<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let dst = out.channel_mut(ch);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let oy = ky as isize - r;
                let ox = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let s = &src[y * w..(y + 1) * w];
                    match pad {
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let base = sy as usize * w;
                            let x0 = (-ox).max(0) as usize;
                            let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                            for xx in x0..x1 {
                                dst[base + (xx as isize + ox) as usize] += s[xx];
                            }
                        }
                        Padding::Circular => {
                            let base = wrap(sy, h) * w;
                            for (xx, &sv) in s.iter().enumerate() {
                                dst[base + wrap(xx as isize + ox, w)] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 "same" convolution. Returns the output and the unfolded input,
/// which the backward pass reuses.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, pad: Padding) -> (Tensor<T>, Vec<T>) {
    let (c, h, w) = x.chw();
    assert_eq!(weight.shape.len(), 4, "conv weight must be [Cout, Cin, K, K]");
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    assert_eq!(cin, c, "conv expects {cin} input channels, got {c}");
    assert_eq!(k % 2, 1, "odd kernels only");
    let cols = if k == 1 { x.data.clone() } else { im2col(x, k, pad) };
    let mut out = Tensor::zeros(&[cout, h, w]);
    gemm_into(&weight.data, cin * k * k, false, &cols, h * w, false, cout, cin * k * k, h * w, T::zero(), &mut out.data);
    (out, cols)
}

/// Gradient of [`conv2d`] w.r.t. its input.
pub fn conv2d_backward_input<T: Real>(grad: &Tensor<T>, weight: &Tensor<T>, pad: Padding) -> Tensor<T> {
    let (cout, h, w) = grad.chw();
    let (cin, k) = (weight.shape[1], weight.shape[2]);
    let kk = cin * k * k;
    let mut dcols = vec![T::zero(); kk * h * w];
    gemm_into(&weight.data, kk, true, &grad.data, h * w, false, kk, cout, h * w, T::zero(), &mut dcols);
    if k == 1 {
        Tensor::new(&[cin, h, w], dcols)
    } else {
        col2im(&dcols, cin, h, w, k, pad)
    }
}

/// Gradient of [`conv2d`] w.r.t. its weight, given the cached columns.
pub fn conv2d_backward_weight<T: Real>(grad: &Tensor<T>, cols: &[T], weight_shape: &[usize]) -> Tensor<T> {
    let (cout, h, w) = grad.chw();
    let kk = weight_shape[1] * weight_shape[2] * weight_shape[3];
    let mut dw = Tensor::zeros(weight_shape);
    gemm_into(&grad.data, h * w, false, cols, h * w, true, cout, h * w, kk, T::zero(), &mut dw.data);
    dw
}

/// 2x upsampling with the separable [1, 3, 3, 1] / 4 kernel (bilinear at
/// half-pixel centers). Boundary samples follow `pad`.
pub fn upsample2x<T: Real>(x: &Tensor<T>, pad: Padding) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (q, tq) = (lit::<T>(0.25), lit::<T>(0.75));
    // rows first into [C, H, 2W], then columns into [C, 2H, 2W]
    let mut tmp = Tensor::zeros(&[c, h, 2 * w]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = tmp.channel_mut(ch);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let get = |i: isize| -> T {
                match pad {
                    Padding::Zero if i < 0 || i >= w as isize => T::zero(),
                    Padding::Zero => row[i as usize],
                    Padding::Circular => row[wrap(i, w)],
                }
            };
            for i in 0..w {
                let ii = i as isize;
                dst[y * 2 * w + 2 * i] = q * get(ii - 1) + tq * row[i];
                dst[y * 2 * w + 2 * i + 1] = tq * row[i] + q * get(ii + 1);
            }
        }
    }
    let w2 = 2 * w;
    let mut out = Tensor::zeros(&[c, 2 * h, w2]);
    for ch in 0..c {
        let src = tmp.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            let yi = y as isize;
            let prev = match pad {
                Padding::Zero if y == 0 => None,
                Padding::Zero => Some(y - 1),
                Padding::Circular => Some(wrap(yi - 1, h)),
            };
            let next = match pad {
                Padding::Zero if y + 1 == h => None,
                Padding::Zero => Some(y + 1),
                Padding::Circular => Some(wrap(yi + 1, h)),
            };
            for xx in 0..w2 {
                let cur = src[y * w2 + xx];
                let p = prev.map_or(T::zero(), |py| src[py * w2 + xx]);
                let n = next.map_or(T::zero(), |ny| src[ny * w2 + xx]);
                dst[(2 * y) * w2 + xx] = q * p + tq * cur;
                dst[(2 * y + 1) * w2 + xx] = tq * cur + q * n;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward<T: Real>(grad: &Tensor<T>, pad: Padding) -> Tensor<T> {
    let (c, h2, w2) = grad.chw();
    let (h, w) = (h2 / 2, w2 / 2);
    let (q, tq) = (lit::<T>(0.25), lit::<T>(0.75));
    let mut tmp = Tensor::zeros(&[c, h, w2]);
    for ch in 0..c {
        let src = grad.channel(ch);
        let dst = tmp.channel_mut(ch);
        for y in 0..h {
            for xx in 0..w2 {
                let g0 = src[(2 * y) * w2 + xx];
                let g1 = src[(2 * y + 1) * w2 + xx];
                dst[y * w2 + xx] += tq * (g0 + g1);
                let yi = y as isize;
                match pad {
                    Padding::Zero => {
                        if y > 0 {
                            dst[(y - 1) * w2 + xx] += q * g0;
                        }
                        if y + 1 < h {
                            dst[(y + 1) * w2 + xx] += q * g1;
                        }
                    }
                    Padding::Circular => {
                        dst[wrap(yi - 1, h) * w2 + xx] += q * g0;
                        dst[wrap(yi + 1, h) * w2 + xx] += q * g1;
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = tmp.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for i in 0..w {
                let g0 = src[y * w2 + 2 * i];
                let g1 = src[y * w2 + 2 * i + 1];
                dst[y * w + i] += tq * (g0 + g1);
                let ii = i as isize;
                match pad {
                    Padding::Zero => {
                        if i > 0 {
                            dst[y * w + i - 1] += q * g0;
                        }
                        if i + 1 < w {
                            dst[y * w + i + 1] += q * g1;
                        }
                    }
                    Padding::Circular => {
                        dst[y * w + wrap(ii - 1, w)] += q * g0;
                        dst[y * w + wrap(ii + 1, w)] += q * g1;
                    }
                }
            }
        }
    }
    out
}

/// Average pooling by an integer factor (area downsampling).
pub fn avg_pool<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0, "pool {factor} does not divide {h}x{w}");
    if factor == 1 {
        return x.clone();
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = lit::<T>(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for xx in 0..w {
                dst[(y / factor) * ow + xx / factor] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Adjoint of [`avg_pool`].
pub fn avg_pool_backward<T: Real>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, oh, ow) = grad.chw();
    if factor == 1 {
        return grad.clone();
    }
    let (h, w) = (oh * factor, ow * factor);
    let inv = lit::<T>(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = grad.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / factor) * ow + xx / factor] * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 4-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor<f64>, wt: &Tensor<f64>, pad: Padding) -> Tensor<f64> {
        let (c, h, w) = x.chw();
        let (cout, k) = (wt.dim(0), wt.dim(2));
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, w]);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                let v = match pad {
                                    Padding::Zero => {
                                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                            0.0
                                        } else {
                                            x.data()[(i * h + sy as usize) * w + sx as usize]
                                        }
                                    }
                                    Padding::Circular => x.data()[(i * h + wrap(sy, h)) * w + wrap(sx, w)],
                                };
                                acc += v * wt.data()[((o * c + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pad in [Padding::Zero, Padding::Circular] {
            let x = Tensor::<f64>::randn(&[3, 5, 7], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let (y, _) = conv2d(&x, &wt, pad);
            assert!(y.max_abs_diff(&conv_naive(&x, &wt, pad)) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> and == <w, dW(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for pad in [Padding::Zero, Padding::Circular] {
            let x = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let g = Tensor::<f64>::randn(&[3, 6, 6], 1.0, &mut rng);
            let (y, cols) = conv2d(&x, &wt, pad);
            let lhs = y.dot(&g);
            let dx = conv2d_backward_input(&g, &wt, pad);
            let dw = conv2d_backward_weight(&g, &cols, wt.shape());
            assert!((lhs - x.dot(&dx)).abs() < 1e-10);
            assert!((lhs - wt.dot(&dw)).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_and_pool_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pad in [Padding::Zero, Padding::Circular] {
            let x = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
            let g = Tensor::<f64>::randn(&[2, 8, 10], 1.0, &mut rng);
            let up = upsample2x(&x, pad);
            assert!((up.dot(&g) - x.dot(&upsample2x_backward(&g, pad))).abs() < 1e-10);
        }
        let x = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[2, 2, 2], 1.0, &mut rng);
        let p = avg_pool(&x, 4);
        assert!((p.dot(&g) - x.dot(&avg_pool_backward(&g, 4))).abs() < 1e-10);
    }

    #[test]
    fn circular_upsample_commutes_with_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
        let a = upsample2x(&x.roll(1, -2), Padding::Circular);
        let b = upsample2x(&x, Padding::Circular).roll(2, -4);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants_in_interior() {
        let x = Tensor::<f32>::full(&[1, 4, 4], 2.0);
        let y = upsample2x(&x, Padding::Circular);
        assert!(y.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
        let z = upsample2x(&x, Padding::Zero);
        assert_eq!(z.data()[3 * 8 + 3], 2.0);
        assert_eq!(z.data()[0], 1.5 * 0.75 + 0.0);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::<f64>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::new(&[3, 2], vec![1., 0., 0., 1., 1., 1.]);
        assert_eq!(matmul(&a, false, &b, false).data(), &[4., 5., 10., 11.]);
        let at = Tensor::<f64>::new(&[3, 2], vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul(&at, true, &b, false).data(), &[4., 5., 10., 11.]);
    }
}
