//! Dense row-major tensors and the raw kernels behind the graph ops.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Storage type tag, also used as the on-disk dtype byte of checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

/// Floating-point element type. `f32` is the training mode, `f64` the checking mode.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

#[inline]
pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| cast(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    /// `0, 1, 2, …` laid out in row-major order.
    pub fn arange(shape: &[usize]) -> Self {
        let n = numel(shape);
        Self::from_parts(shape.to_vec(), (0..n).map(|i| cast(i as f64)).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = numel(shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                cast(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = numel(shape);
        let data = (0..n).map(|_| cast(rng.random_range(lo..hi))).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                detail: format!("{axes:?} is not a permutation of {n} axes"),
            });
        }
        Ok(permute_raw(self, axes))
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn permute_raw<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let n = x.ndim();
    let in_st = strides(&x.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    // stride in the input for each output axis
    let src_st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(x.data[off]);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += src_st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

const PAR_MIN_WORK: usize = 1 << 16;

/// Sizes the global worker pool used by large matrix products. Rows are
/// computed independently, so results do not depend on the thread count.
/// Only the first call takes effect.
pub fn init_threads(threads: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .is_ok()
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if rayon::current_num_threads() > 1 && m * k * n >= PAR_MIN_WORK {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cv += acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Zero padding mode of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on every side.
    Same,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let k = w[0];
        if !(k == 1 || k == 3) || w[1] != k {
            return Err(Error::Config(format!("conv2d: unsupported kernel {}x{}", w[0], w[1])));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv2d: unsupported stride {stride}")));
        }
        if x[3] != w[2] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::None => 0,
        };
        let (h, wd) = (x[1], x[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        Ok(Self {
            b: x[0],
            h,
            w: wd,
            cin: x[3],
            cout: w[3],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Source pixel `(y, x)` for output `(oy, ox)` and tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfold NHWC input into `[B·Ho·Wo, k·k·Cin]` patches ordered `(ky, kx, ci)`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let r = (b * g.ho + oy) * g.wo + ox;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let src = ((b * g.h + y) * g.w + xx) * g.cin;
                            let d = (ky * g.k + kx) * g.cin;
                            dst[d..d + g.cin].copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.b * g.h * g.w * g.cin];
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let r = (b * g.ho + oy) * g.wo + ox;
                let src = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let dst = ((b * g.h + y) * g.w + xx) * g.cin;
                            let s = (ky * g.k + kx) * g.cin;
                            for (d, &v) in x[dst..dst + g.cin].iter_mut().zip(&src[s..s + g.cin]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Flat source offset for every output element of a pixel shuffle with factor `r`.
///
/// Channel `c·r² + dy·r + dx` of input pixel `(y, x)` moves to channel `c` of
/// output pixel `(y·r + dy, x·r + dx)`.
pub(crate) fn pixel_shuffle_index(shape: &[usize], r: usize) -> Vec<usize> {
    let (b, h, w, cin) = (shape[0], shape[1], shape[2], shape[3]);
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, dy, x, dx) = (oy / r, oy % r, ox / r, ox % r);
                for ci in 0..c {
                    let ch = ci * r * r + dy * r + dx;
                    idx.push(((bi * h + y) * w + x) * cin + ch);
                }
            }
        }
    }
    idx
}

/// Applies `out[i] = x[index[i]]`.
pub(crate) fn gather<T: Scalar>(x: &[T], index: &[usize]) -> Vec<T> {
    index.iter().map(|&i| x[i]).collect()
}

/// Adjoint of [`gather`] for a bijective index.
pub(crate) fn scatter<T: Scalar>(g: &[T], index: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&i, &v) in index.iter().zip(g) {
        out[i] += v;
    }
    out
}
