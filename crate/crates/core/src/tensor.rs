//! Dense row-major tensors and the primitive kernels the layers are built on.
//!
//! Every spatial kernel works on the two trailing axes and treats all leading
//! axes as a flat batch of planes. Summation orders are fixed by the loop nests
//! (and by the blocked GEMM for convolutions), so a given input always produces
//! bit-identical output.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type usable in tensors (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit strides (matrixmultiply conventions).
    ///
    /// # Safety
    /// Pointers and strides must describe valid, in-bounds matrices of the given sizes,
    /// and `c` must not alias `a` or `b`.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
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

impl Scalar for f64 {
    const NAME: &'static str = "f64";
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

/// Row-major matrix operand for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub enum Op {
    N,
    T,
}

/// `c[m×n] = a·b + beta·c` for row-major slices, optionally transposing `a` or `b`.
///
/// `a` is stored `m×k` (or `k×m` when transposed), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], op_a: Op, b: &[F], op_b: Op, beta: F, c: &mut [F]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths checked above; `c` is a distinct &mut borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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
pub struct Tensor<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Extent of axis `axis`, counting negative values from the end.
    pub fn dim(&self, axis: isize) -> usize {
        let r = self.shape.len() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        self.shape[a as usize]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same_shape(other, "zip")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(F::zero(), |m, (&a, &b)| {
            let d = (a - b).abs();
            if d > m || d.is_nan() {
                d
            } else {
                m
            }
        }))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug builds surface NaN/Inf as an error; release builds skip the scan.
    pub(crate) fn debug_check_finite(&self, what: &str) -> Result<()> {
        if cfg!(debug_assertions) && !self.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn reduce_mean(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for {:?}", self.shape));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let mut out = vec![F::zero(); outer * inner];
        let inv = if n > 0 {
            F::one() / F::from_usize(n).unwrap()
        } else {
            F::nan()
        };
        for o in 0..outer {
            for j in 0..n {
                let src = &self.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        Tensor::from_vec(&shape, out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return shape_err(format!("axis {axis} out of range for {:?}", first.shape));
        }
        for p in parts {
            if p.rank() != first.rank()
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return shape_err(format!("concat axis {axis}: {:?} vs {:?}", first.shape, p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::from_vec(&shape, data)
    }

    /// Inverse of [`Tensor::concat`]: split `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return shape_err(format!("cannot split {:?} into {sizes:?}", self.shape));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut offset = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let start = o * full + offset * inner;
                data.extend_from_slice(&self.data[start..start + s * inner]);
            }
            let mut shape = self.shape.clone();
            shape[axis] = s;
            out.push(Tensor::from_vec(&shape, data)?);
            offset += s;
        }
        Ok(out)
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn index_first(&self, i: usize) -> Result<Self> {
        if self.rank() == 0 || i >= self.shape[0] {
            return shape_err(format!("index {i} out of range for {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_vec(&self.shape[1..], self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.check_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    fn planes(&self, what: &str) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return shape_err(format!("{what} needs at least 2 axes, got {:?}", self.shape));
        }
        let h = self.dim(-2);
        let w = self.dim(-1);
        let n = if h * w == 0 { 0 } else { self.len() / (h * w) };
        Ok((n, h, w))
    }

    fn with_plane_dims(&self, h: usize, w: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        let r = s.len();
        s[r - 2] = h;
        s[r - 1] = w;
        s
    }
}

/// Zero border of `width` pixels around every plane; the interior is copied verbatim.
pub fn pad_zero<F: Scalar>(input: &Tensor<F>, width: usize) -> Result<Tensor<F>> {
    let (n, h, w) = input.planes("pad_zero")?;
    let (hp, wp) = (h + 2 * width, w + 2 * width);
    let mut out = Tensor::zeros(&input.with_plane_dims(hp, wp));
    for p in 0..n {
        for i in 0..h {
            let src = &input.data[(p * h + i) * w..(p * h + i + 1) * w];
            let start = (p * hp + i + width) * wp + width;
            out.data[start..start + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Remove `width` pixels from every side of every plane.
pub fn crop<F: Scalar>(input: &Tensor<F>, width: usize) -> Result<Tensor<F>> {
    let (n, h, w) = input.planes("crop")?;
    if 2 * width > h || 2 * width > w {
        return shape_err(format!("cannot crop {width} from {h}x{w}"));
    }
    let (hc, wc) = (h - 2 * width, w - 2 * width);
    let mut out = Tensor::zeros(&input.with_plane_dims(hc, wc));
    for p in 0..n {
        for i in 0..hc {
            let start = (p * h + i + width) * w + width;
            out.data[(p * hc + i) * wc..(p * hc + i + 1) * wc].copy_from_slice(&input.data[start..start + wc]);
        }
    }
    Ok(out)
}

/// Mean of each aligned 2×2 block.
pub fn avgpool2x2<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, h, w) = input.planes("avgpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("avgpool2x2 needs even extents, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(&input.with_plane_dims(ho, wo));
    for p in 0..n {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = ((a + b) + (c + d)) * quarter;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avgpool2x2`]: spread each gradient value over its block with weight 1/4.
pub fn avgpool2x2_backward<F: Scalar>(grad: &Tensor<F>) -> Result<Tensor<F>> {
    let up = upsample_nearest2x(grad)?;
    Ok(up.scale(F::from_f64_lossy(0.25)))
}

/// Replicate every pixel into a 2×2 block.
pub fn upsample_nearest2x<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, h, w) = input.planes("upsample_nearest2x")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&input.with_plane_dims(ho, wo));
    for p in 0..n {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest2x`]: sum of each 2×2 block.
pub fn upsample_nearest2x_backward<F: Scalar>(grad: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(avgpool2x2(grad)?.scale(F::from_f64_lossy(4.0)))
}

/// Source taps for half-pixel-centred 2× linear interpolation along one axis.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// 2× bilinear upsampling with half-pixel centres and edge clamping.
pub fn upsample_bilinear2x<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, h, w) = input.planes("upsample_bilinear2x")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&input.with_plane_dims(ho, wo));
    if n == 0 {
        return Ok(out);
    }
    let rows = bilinear_taps(h);
    let cols = bilinear_taps(w);
    for p in 0..n {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * ho * wo..(p + 1) * ho * wo];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = F::from_f64_lossy(fr);
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = F::from_f64_lossy(fc);
                let top = src[r0 * w + c0] * (F::one() - fc) + src[r0 * w + c1] * fc;
                let bot = src[r1 * w + c0] * (F::one() - fc) + src[r1 * w + c1] * fc;
                dst[i * wo + j] = top * (F::one() - fr) + bot * fr;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear2x`].
pub fn upsample_bilinear2x_backward<F: Scalar>(grad: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, ho, wo) = grad.planes("upsample_bilinear2x_backward")?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return shape_err(format!("bilinear backward needs even extents, got {ho}x{wo}"));
    }
    let (h, w) = (ho / 2, wo / 2);
    let mut out = Tensor::zeros(&grad.with_plane_dims(h, w));
    if n == 0 {
        return Ok(out);
    }
    let rows = bilinear_taps(h);
    let cols = bilinear_taps(w);
    for p in 0..n {
        let src = &grad.data[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = F::from_f64_lossy(fr);
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = F::from_f64_lossy(fc);
                let g = src[i * wo + j];
                let gt = g * (F::one() - fr);
                let gb = g * fr;
                dst[r0 * w + c0] += gt * (F::one() - fc);
                dst[r0 * w + c1] += gt * fc;
                dst[r1 * w + c0] += gb * (F::one() - fc);
                dst[r1 * w + c1] += gb * fc;
            }
        }
    }
    Ok(out)
}

/// Stride, zero padding, and (odd) kernel size of a 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub kernel_size: usize,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            kernel_size,
        }
    }

    /// `k×k`, stride 1, padding `(k-1)/2`: output keeps the input extent.
    pub fn same(kernel_size: usize) -> Self {
        Self::new(kernel_size, 1, kernel_size / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::UnsupportedKernelSize(self.kernel_size));
        }
        if self.stride == 0 {
            return Err(Error::Precondition("stride must be positive".into()));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel_size {
                return shape_err(format!(
                    "kernel {} larger than padded extent {padded}",
                    self.kernel_size
                ));
            }
            Ok((padded - self.kernel_size) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }
}

/// Geometry of one planar correlation, fixed per input shape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let (ho, wo) = spec.output_size(h, w)?;
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            ho,
            wo,
            spec,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.spec.kernel_size * self.spec.kernel_size
    }

    fn is_pointwise(&self) -> bool {
        self.spec.kernel_size == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Unfold one input item `[c_in, h, w]` into columns `[c_in·k·k, ho·wo]`.
    fn im2col<F: Scalar>(&self, input: &[F], col: &mut Vec<F>) {
        let k = self.spec.kernel_size;
        let (s, pad) = (self.spec.stride as isize, self.spec.padding as isize);
        let npix = self.ho * self.wo;
        col.clear();
        col.resize(self.patch_len() * npix, F::zero());
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    let dst = &mut col[row * npix..(row + 1) * npix];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s + dy as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + dx as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back onto the input grid, summing overlaps (adjoint of im2col).
    fn col2im<F: Scalar>(&self, col: &[F], out: &mut [F]) {
        let k = self.spec.kernel_size;
        let (s, pad) = (self.spec.stride as isize, self.spec.padding as isize);
        let npix = self.ho * self.wo;
        for c in 0..self.c_in {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    let src = &col[row * npix..(row + 1) * npix];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s + dy as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = ox as isize * s + dx as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Correlate one item: `out[c_out, ho·wo] = weights[c_out, patch] × col`.
    pub fn forward_item<F: Scalar>(&self, input: &[F], weights: &[F], out: &mut [F], scratch: &mut Vec<F>) {
        let npix = self.ho * self.wo;
        let cols: &[F] = if self.is_pointwise() {
            input
        } else {
            self.im2col(input, scratch);
            scratch
        };
        gemm(
            self.c_out,
            self.patch_len(),
            npix,
            weights,
            Op::N,
            cols,
            Op::N,
            F::zero(),
            out,
        );
    }

    /// Gradients for one item. Accumulates into `dweights`; overwrites `dinput`.
    pub fn backward_item<F: Scalar>(
        &self,
        input: &[F],
        weights: &[F],
        dout: &[F],
        dweights: &mut [F],
        dinput: Option<&mut [F]>,
        scratch: &mut Vec<F>,
    ) {
        let npix = self.ho * self.wo;
        let patch = self.patch_len();
        if self.is_pointwise() {
            gemm(self.c_out, npix, patch, dout, Op::N, input, Op::T, F::one(), dweights);
            if let Some(dx) = dinput {
                gemm(patch, self.c_out, npix, weights, Op::T, dout, Op::N, F::zero(), dx);
            }
            return;
        }
        self.im2col(input, scratch);
        gemm(self.c_out, npix, patch, dout, Op::N, scratch, Op::T, F::one(), dweights);
        if let Some(dx) = dinput {
            gemm(patch, self.c_out, npix, weights, Op::T, dout, Op::N, F::zero(), scratch);
            dx.iter_mut().for_each(|v| *v = F::zero());
            self.col2im(scratch, dx);
        }
    }
}

/// Planar cross-correlation of `input [C_in, H, W]` with `weights [C_out, C_in, k, k]`.
///
/// `out(o, x) = Σ_c Σ_d in(c, x·stride + d − pad) · w(o, c, d)` with zero padding.
pub fn correlate2d<F: Scalar>(input: &Tensor<F>, weights: &Tensor<F>, spec: ConvSpec) -> Result<Tensor<F>> {
    if input.rank() != 3 || weights.rank() != 4 {
        return shape_err(format!(
            "correlate2d expects [C,H,W] and [O,C,k,k], got {:?} and {:?}",
            input.shape(),
            weights.shape()
        ));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, wc, kh, kw) = (weights.shape[0], weights.shape[1], weights.shape[2], weights.shape[3]);
    if wc != c_in || kh != kw || kh != spec.kernel_size {
        return shape_err(format!(
            "weights {:?} incompatible with input {:?} and kernel size {}",
            weights.shape(),
            input.shape(),
            spec.kernel_size
        ));
    }
    let geo = ConvGeometry::new(c_in, h, w, c_out, spec)?;
    let mut out = Tensor::zeros(&[c_out, geo.ho, geo.wo]);
    let mut scratch = Vec::new();
    geo.forward_item(&input.data, &weights.data, &mut out.data, &mut scratch);
    out.debug_check_finite("correlate2d")?;
    Ok(out)
}
