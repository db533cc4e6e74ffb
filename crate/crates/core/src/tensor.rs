//! Dense row-major tensors of rank at most four.
//!
//! Feature maps use the `N × C × H × W` layout, so the flat index of
//! `(n, c, h, w)` is `((n·C + c)·H + h)·W + w`. The element type is generic
//! over [`Scalar`]; training runs in `f32` and gradient verification in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← alpha·A·B + beta·C` on strided row/column views.
    ///
    /// # Safety
    /// The strides and dimensions must describe views that lie inside the
    /// provided slices.
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
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `C (m×n) = op(A) (m×k) · op(B) (k×n)`, optionally
/// accumulating into `C`. `a_t`/`b_t` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every view inside its slice.
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
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::invalid(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Dimensions of a rank-4 tensor as `(N, C, H, W)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected an N×C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Mul, self, Operand::Tensor(other))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        elementwise(ElementwiseOp::Div, self, Operand::Tensor(other))
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    /// Multiplication by a scalar operand.
    Scale,
}

/// Second operand of a binary elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
    None,
}

/// Maps each flat index of `shape` to its channel (axis 1) index.
fn channel_of(shape: &[usize], flat: usize) -> usize {
    let inner: usize = shape[2..].iter().product();
    (flat / inner) % shape[1]
}

pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    use ElementwiseOp::*;
    let out = match op {
        Relu => a.relu(),
        Exp => a.map(|v| v.exp()),
        Log => {
            if let Some(bad) = a.data.iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
            a.map(|v| v.ln())
        }
        Scale => match b {
            Operand::Scalar(s) => a.scale(s),
            _ => return Err(Error::invalid("scale requires a scalar operand")),
        },
        Add | Sub | Mul | Div => {
            let f = |x: T, y: T| match op {
                Add => x + y,
                Sub => x - y,
                Mul => x * y,
                _ => x / y,
            };
            match b {
                Operand::Scalar(s) => a.map(|v| f(v, s)),
                Operand::Tensor(bt) if bt.shape == a.shape => Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&bt.data).map(|(&x, &y)| f(x, y)).collect(),
                },
                Operand::Tensor(bt) if bt.rank() == 1 && a.rank() >= 2 && bt.shape[0] == a.shape[1] => Tensor {
                    shape: a.shape.clone(),
                    data: a
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, bt.data[channel_of(&a.shape, i)]))
                        .collect(),
                },
                Operand::Tensor(bt) => return Err(Error::shape("elementwise", &a.shape, &bt.shape)),
                Operand::None => return Err(Error::invalid(format!("{op:?} requires a second operand"))),
            }
        }
    };
    if a.all_finite() && !out.all_finite() {
        return Err(Error::Domain {
            op: "elementwise",
            detail: format!("{op:?} produced a non-finite value"),
        });
    }
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Mean and `sqrt(population variance + eps)` over `axes`; the reduced axes
/// are removed from the output shape.
pub fn reduce_mean_std<T: Scalar>(t: &Tensor<T>, axes: &[usize], eps: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if axes.is_empty() || axes.iter().any(|&a| a >= t.rank()) {
        return Err(Error::invalid(format!(
            "invalid reduction axes {axes:?} for shape {:?}",
            t.shape
        )));
    }
    if eps < 0.0 {
        return Err(Error::invalid(format!("eps must be non-negative, got {eps}")));
    }
    let count: usize = axes.iter().map(|&a| t.shape[a]).product();
    if count == 0 {
        return Err(Error::EmptyReduction {
            axes: axes.to_vec(),
            shape: t.shape.clone(),
        });
    }
    let kept: Vec<usize> = (0..t.rank()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| t.shape[a]).collect();
    let out_strides = strides(&out_shape);
    let in_strides = strides(&t.shape);
    let out_len: usize = out_shape.iter().product();

    let out_index = |flat: usize| -> usize {
        kept.iter()
            .zip(&out_strides)
            .map(|(&a, &s)| (flat / in_strides[a]) % t.shape[a] * s)
            .sum()
    };

    let mut sums = vec![0.0f64; out_len];
    for (i, v) in t.data.iter().enumerate() {
        sums[out_index(i)] += v.as_f64();
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; out_len];
    for (i, v) in t.data.iter().enumerate() {
        let o = out_index(i);
        let d = v.as_f64() - means[o];
        sq[o] += d * d;
    }
    let stds: Vec<f64> = sq.iter().map(|s| (s / count as f64 + eps).sqrt()).collect();
    Ok((
        Tensor::from_f64_slice(&out_shape, &means)?,
        Tensor::from_f64_slice(&out_shape, &stds)?,
    ))
}

/// Numerically safe softmax along `axis` (max subtraction).
pub fn softmax<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    along_axis(t, axis, |vals, out| {
        let max = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in out.iter_mut().zip(vals) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in out.iter_mut() {
            *o = *o / total;
        }
    })
}

pub fn log_softmax<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    along_axis(t, axis, |vals, out| {
        let max = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = vals.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in out.iter_mut().zip(vals) {
            *o = v - lse;
        }
    })
}

/// Applies `f` to every 1-D lane of `t` along `axis`.
fn along_axis<T: Scalar>(t: &Tensor<T>, axis: usize, f: impl Fn(&[T], &mut [T])) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(Error::invalid(format!("axis {axis} out of range for {:?}", t.shape)));
    }
    let len = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let outer: usize = t.shape[..axis].iter().product();
    let mut out = t.clone();
    let mut lane = vec![T::zero(); len];
    let mut result = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = t.data[idx(j)];
            }
            f(&lane, &mut result);
            for (j, r) in result.iter().enumerate() {
                out.data[idx(j)] = *r;
            }
        }
    }
    Ok(out)
}

/// Unfolds one image `C × H × W` into a `(C·k·k) × (Ho·Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize] =
                                img[(ci * h + iy as usize) * w + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, ci, k, k2) = w.dims4()?;
        if ci != c || k != k2 {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid(format!(
                "conv2d kernel {k} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            out_channels: o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Cross-correlation of `x (N×C×H×W)` with `w (O×C×k×k)` plus per-channel `bias`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, w, stride, pad)?;
    if bias.shape() != [g.out_channels] {
        return Err(Error::shape("conv2d bias", bias.shape(), &[g.out_channels]));
    }
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.out_channels * plane];
    let mut cols = vec![T::zero(); g.patch_len() * plane];
    let img_len = g.c * g.h * g.w;
    for ni in 0..g.n {
        im2col(
            &x.data[ni * img_len..(ni + 1) * img_len],
            g.c,
            g.h,
            g.w,
            g.k,
            g.stride,
            g.pad,
            g.ho,
            g.wo,
            &mut cols,
        );
        let dst = &mut out[ni * g.out_channels * plane..(ni + 1) * g.out_channels * plane];
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data[o]);
        }
        matmul(
            &w.data,
            false,
            &cols,
            false,
            g.out_channels,
            g.patch_len(),
            plane,
            dst,
            true,
        );
    }
    Tensor::from_vec(&[g.n, g.out_channels, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(x, w, stride, pad)?;
    let plane = g.ho * g.wo;
    let plen = g.patch_len();
    let img_len = g.c * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_channels];
    let mut cols = vec![T::zero(); plen * plane];
    let mut dcols = vec![T::zero(); plen * plane];
    for ni in 0..g.n {
        let dy = &dout.data[ni * g.out_channels * plane..(ni + 1) * g.out_channels * plane];
        for (o, chunk) in dy.chunks(plane).enumerate() {
            db[o] = db[o] + chunk.iter().copied().sum::<T>();
        }
        im2col(
            &x.data[ni * img_len..(ni + 1) * img_len],
            g.c,
            g.h,
            g.w,
            g.k,
            g.stride,
            g.pad,
            g.ho,
            g.wo,
            &mut cols,
        );
        // dW (O×plen) += dY (O×plane) · colsᵀ (plane×plen)
        matmul(dy, false, &cols, true, g.out_channels, plane, plen, &mut dw, true);
        // dcols (plen×plane) = Wᵀ (plen×O) · dY (O×plane)
        matmul(&w.data, true, dy, false, plen, g.out_channels, plane, &mut dcols, false);
        col2im_add(
            &dcols,
            g.c,
            g.h,
            g.w,
            g.k,
            g.stride,
            g.pad,
            g.ho,
            g.wo,
            &mut dx[ni * img_len..(ni + 1) * img_len],
        );
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        Tensor::from_vec(&[g.out_channels], db)?,
    ))
}

/// 2×2 max-pooling with stride 2 (floor). Returns the pooled tensor and, for
/// every output element, the flat input index it was taken from.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::invalid(format!("max-pool input {h}×{w} too small")));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.push(x.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

/// Mean over the spatial axes: `N×C×H×W → N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let data = x
        .data
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

/// `x (N×D) · wᵀ (D×K) + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, d], &[k, d2]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    };
    if d != d2 || b.shape() != [k] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| b.data.iter().copied()).collect();
    matmul(&x.data, false, &w.data, true, n, d, k, &mut out, true);
    Tensor::from_vec(&[n, k], out)
}
