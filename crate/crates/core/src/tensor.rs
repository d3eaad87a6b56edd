//! Dense row-major tensors and the primitive kernels the layers are built on.
//!
//! Every reduction in this module runs in a fixed order so that repeated runs
//! produce identical bits. Work may be split across threads only along axes
//! whose elements are computed independently (rows of a matrix product,
//! images of a batch), which keeps results independent of the worker count.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;
use thiserror::Error;

/// Work size (multiply-adds) above which matrix products are split across rows.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Floating point element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Real:
    Float + Sum + Send + Sync + Debug + Display + Default + PartialOrd + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Batch, channel, height and width of an image-like blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(TensorError::Shape(format!(
                "all dimensions must be positive, got {n}x{c}x{h}x{w}"
            )));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.item_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn with_batch(self, n: usize) -> Self {
        Shape4 { n, ..self }
    }
}

impl Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::Shape(format!(
            "shape {shape:?} must be a nonempty list of positive sizes"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} holds {len} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        Ok(Tensor { shape, data: vec![value; len] })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::filled(shape, T::zero())
    }

    /// Zeros with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn from_shape4(shape: Shape4, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(shape.dims().to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the values. The shape stays fixed.
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Interprets a 4-D tensor (or a 2-D `[N, F]` one as `[N, F, 1, 1]`).
    pub fn shape4(&self) -> Result<Shape4, TensorError> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Shape4::new(n, c, h, w),
            [n, f] => Shape4::new(n, f, 1, 1),
            _ => Err(TensorError::Shape(format!(
                "expected a 2-D or 4-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Inner product of the flattened values, accumulated in 64-bit.
    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`. Each output element is
/// summed over `k` in ascending order starting from zero.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        crow.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c = a * b^T` for `a: m x k`, `b: n x k`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *cv = acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c = a^T * b` for `a: k x m`, `b: k x n`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        crow.fill(T::zero());
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return Err(TensorError::Shape(format!("matmul lhs must be 2-D, got {:?}", a.shape()))),
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        _ => return Err(TensorError::Shape(format!("matmul rhs must be 2-D, got {:?}", b.shape()))),
    };
    if k != k2 {
        return Err(TensorError::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Output length of a sliding window: `floor((input + 2 pad - kernel) / stride) + 1`.
pub fn window_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, TensorError> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Argument("kernel and stride must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(TensorError::Shape(format!(
            "kernel {kernel} larger than padded input {} (input {input}, pad {pad})",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Geometry of one image's patch matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PatchGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeometry {
    pub fn new(c: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self, TensorError> {
        let out_h = window_out(h, kernel, stride, pad)?;
        let out_w = window_out(w, kernel, stride, pad)?;
        Ok(PatchGeometry { c, h, w, kernel, stride, pad, out_h, out_w })
    }

    /// Rows of the patch matrix: `c * kernel * kernel`.
    pub fn rows(&self) -> usize {
        self.c * self.kernel * self.kernel
    }

    /// Columns of the patch matrix for one image: `out_h * out_w`.
    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(row, col, source_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for ch in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            let src = (ch * self.h + ih as usize) * self.w + iw as usize;
                            f(row, oh * self.out_w + ow, src);
                        }
                    }
                }
            }
        }
    }

    /// Unrolls one `c x h x w` image into a `rows x cols` patch matrix.
    pub fn unroll<T: Real>(&self, image: &[T], out: &mut [T]) {
        out.fill(T::zero());
        let cols = self.cols();
        self.for_each_tap(|row, col, src| out[row * cols + col] = image[src]);
    }

    /// Adjoint of [`unroll`](Self::unroll): scatters-adds a patch matrix back into an image.
    pub fn fold<T: Real>(&self, patches: &[T], image: &mut [T]) {
        image.fill(T::zero());
        let cols = self.cols();
        self.for_each_tap(|row, col, src| image[src] = image[src] + patches[row * cols + col]);
    }
}

/// Unrolls every receptive field of `x: [N, C, H, W]` into a column.
///
/// The result has shape `[C * kernel * kernel, N * OH * OW]`; column
/// `n * OH * OW + oh * OW + ow` is the field at output position `(oh, ow)` of
/// image `n`. Padded taps read as zero.
pub fn im2col<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>, TensorError> {
    let s = x.shape4()?;
    if x.ndim() != 4 {
        return Err(TensorError::Shape(format!("im2col needs a 4-D input, got {:?}", x.shape())));
    }
    let g = PatchGeometry::new(s.c, s.h, s.w, kernel, stride, pad)?;
    let (rows, cols) = (g.rows(), g.cols());
    let total_cols = s.n * cols;
    let mut out = vec![T::zero(); rows * total_cols];
    let mut scratch = vec![T::zero(); rows * cols];
    for (n, image) in x.data().chunks(s.item_len()).enumerate() {
        g.unroll(image, &mut scratch);
        for r in 0..rows {
            out[r * total_cols + n * cols..r * total_cols + (n + 1) * cols]
                .copy_from_slice(&scratch[r * cols..(r + 1) * cols]);
        }
    }
    Tensor::new(vec![rows, total_cols], out)
}

/// Adjoint of [`im2col`]: accumulates columns back into an `[N, C, H, W]` tensor.
pub fn col2im<T: Real>(
    cols: &Tensor<T>,
    shape: Shape4,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = PatchGeometry::new(shape.c, shape.h, shape.w, kernel, stride, pad)?;
    let (rows, per) = (g.rows(), g.cols());
    if cols.shape() != [rows, shape.n * per] {
        return Err(TensorError::Shape(format!(
            "col2im expected columns {:?}, got {:?}",
            [rows, shape.n * per],
            cols.shape()
        )));
    }
    let total_cols = shape.n * per;
    let mut out = vec![T::zero(); shape.len()];
    let mut scratch = vec![T::zero(); rows * per];
    for (n, image) in out.chunks_mut(shape.item_len()).enumerate() {
        for r in 0..rows {
            scratch[r * per..(r + 1) * per]
                .copy_from_slice(&cols.data()[r * total_cols + n * per..r * total_cols + (n + 1) * per]);
        }
        g.fold(&scratch, image);
    }
    Tensor::from_shape4(shape, out)
}

/// Mean and biased (divide-by-m) variance over `reduce_axes`.
///
/// The outputs keep the non-reduced axes in order; reducing every axis yields
/// shape `[1]`. Sums are accumulated in 64-bit in element order.
pub fn moments<T: Real>(x: &Tensor<T>, reduce_axes: &[usize]) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    if reduce_axes.is_empty() {
        return Err(TensorError::Argument("moments needs at least one reduction axis".into()));
    }
    let ndim = x.ndim();
    let mut reduced = vec![false; ndim];
    for &a in reduce_axes {
        if a >= ndim {
            return Err(TensorError::Argument(format!("axis {a} out of range for shape {:?}", x.shape())));
        }
        if reduced[a] {
            return Err(TensorError::Argument(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = (0..ndim).filter(|&a| !reduced[a]).map(|a| x.shape()[a]).collect();
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    let out_len: usize = out_shape.iter().product();
    let m = x.len() / out_len;

    // Output stride of each input axis (0 for reduced axes).
    let mut out_stride = vec![0usize; ndim];
    let mut acc = 1;
    for a in (0..ndim).rev() {
        if !reduced[a] {
            out_stride[a] = acc;
            acc *= x.shape()[a];
        }
    }
    let out_index: Vec<usize> = {
        let mut idx = vec![0usize; ndim];
        let mut out_i = 0usize;
        let mut v = Vec::with_capacity(x.len());
        for _ in 0..x.len() {
            v.push(out_i);
            for a in (0..ndim).rev() {
                idx[a] += 1;
                out_i += out_stride[a];
                if idx[a] < x.shape()[a] {
                    break;
                }
                out_i -= out_stride[a] * idx[a];
                idx[a] = 0;
            }
        }
        v
    };

    let mut sum = vec![0f64; out_len];
    for (&v, &o) in x.data().iter().zip(&out_index) {
        sum[o] += v.as_f64();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
    let mut sq = vec![0f64; out_len];
    for (&v, &o) in x.data().iter().zip(&out_index) {
        let d = v.as_f64() - mean[o];
        sq[o] += d * d;
    }
    let var: Vec<T> = sq.iter().map(|s| T::lit(s / m as f64)).collect();
    let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
    Ok((Tensor::new(out_shape.clone(), mean)?, Tensor::new(out_shape, var)?))
}

/// Indices of the `k` largest scores in descending order; equal scores are
/// ordered by lower index first. NaN compares above every number.
pub fn topk_indices<T: Real>(scores: &[T], k: usize) -> Result<Vec<usize>, TensorError> {
    if k == 0 || k > scores.len() {
        return Err(TensorError::Argument(format!(
            "k = {k} must be in 1..={}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .as_f64()
            .total_cmp(&scores[*a].as_f64())
            .then(a.cmp(b))
    };
    if k < scores.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}
