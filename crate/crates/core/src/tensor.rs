//! Dense row-major `f64` tensors and the numeric kernels the layers are built from.
//!
//! Convolutions follow the cross-correlation convention (kernels are not
//! flipped) with valid padding. Every `*_grad` kernel is the exact adjoint of
//! its forward kernel, so the same routine serves both backprop (called with
//! the forward weights) and feedback alignment (called with the feedback
//! weights).

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

impl Tensor {
    /// Builds a tensor, checking that the extents cover the data and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("Tensor::new", format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract {
                op: "Tensor::new",
                detail: format!("non-finite value {} at flat index {i}", data[i]),
            });
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernels whose output shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        self.expect_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Inner product of the flattened values.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::dim(op, format!("expected rank {rank}, got shape {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `w[m×n] · x[n]` for a flattened `x`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    w.expect_rank(2, "matvec")?;
    let (m, n) = (w.shape[0], w.shape[1]);
    if x.len() != n {
        return Err(Error::dim("matvec", format!("{:?} x {:?}", w.shape, x.shape)));
    }
    let out = w
        .data
        .chunks_exact(n)
        .map(|row| row.iter().zip(&x.data).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::from_parts(vec![m], out))
}

/// `w[m×n]ᵀ · d[m]`.
pub fn matvec_transposed(w: &Tensor, d: &Tensor) -> Result<Tensor> {
    w.expect_rank(2, "matvec_transposed")?;
    let (m, n) = (w.shape[0], w.shape[1]);
    if d.len() != m {
        return Err(Error::dim("matvec_transposed", format!("{:?}ᵀ x {:?}", w.shape, d.shape)));
    }
    let mut out = vec![0.0; n];
    for (row, &di) in w.data.chunks_exact(n).zip(&d.data) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * di;
        }
    }
    Ok(Tensor::from_parts(vec![n], out))
}

/// Outer product `d[m] · x[n]ᵀ`, the dense weight gradient.
pub fn outer(d: &Tensor, x: &Tensor) -> Tensor {
    let (m, n) = (d.len(), x.len());
    let mut out = Vec::with_capacity(m * n);
    for &di in &d.data {
        out.extend(x.data.iter().map(|&xv| di * xv));
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Geometry of one valid-padding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::dim("conv2d", "kernel size and stride must be positive"));
        }
        if in_h < kernel || in_w < kernel {
            return Err(Error::dim(
                "conv2d",
                format!("input {in_h}x{in_w} smaller than kernel {kernel}x{kernel}"),
            ));
        }
        if !(in_h - kernel).is_multiple_of(stride) || !(in_w - kernel).is_multiple_of(stride) {
            return Err(Error::dim(
                "conv2d",
                format!("input {in_h}x{in_w}, kernel {kernel}, stride {stride} has no exact output extent"),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel,
            stride,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
        })
    }

    fn from_operands(input_shape: &[usize], kernels: &Tensor, stride: usize, op: &'static str) -> Result<Self> {
        kernels.expect_rank(4, op)?;
        let ks = kernels.shape();
        if ks[2] != ks[3] {
            return Err(Error::dim(op, format!("kernels must be square, got {ks:?}")));
        }
        if input_shape.len() != 3 {
            return Err(Error::dim(op, format!("expected C×H×W input, got {input_shape:?}")));
        }
        if input_shape[0] != ks[1] {
            return Err(Error::dim(
                op,
                format!("input has {} channels, kernels expect {}", input_shape[0], ks[1]),
            ));
        }
        Self::new(ks[1], ks[0], input_shape[1], input_shape[2], ks[2], stride)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Valid cross-correlation of `x[C_in×H×W]` with `kernels[C_out×C_in×k×k]`.
///
/// For each output element the products are accumulated in `(c_in, ky, kx)`
/// order starting from zero.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeometry::from_operands(x.shape(), kernels, stride, "conv2d")?;
    let (k, s) = (g.kernel, g.stride);
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_channels * plane_out];
    for oc in 0..g.out_channels {
        let out_plane = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..g.in_channels {
            let in_plane = &x.data[ic * plane_in..(ic + 1) * plane_in];
            let kbase = (oc * g.in_channels + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let w = kernels.data[kbase + ky * k + kx];
                    for oy in 0..g.out_h {
                        let in_row = &in_plane[(oy * s + ky) * g.in_w..];
                        let out_row = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        if s == 1 {
                            for (o, &v) in out_row.iter_mut().zip(&in_row[kx..kx + g.out_w]) {
                                *o += w * v;
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o += w * in_row[ox * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

/// Adjoint of [`conv2d`] with respect to its input.
///
/// `kernels` may be the forward weights (backprop) or the fixed feedback
/// weights (feedback alignment); the routine is the same either way.
pub fn conv2d_input_grad(
    delta: &Tensor,
    kernels: &Tensor,
    input_shape: &[usize],
    stride: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::from_operands(input_shape, kernels, stride, "conv2d_input_grad")?;
    if delta.shape() != g.output_shape() {
        return Err(Error::dim(
            "conv2d_input_grad",
            format!("delta {:?} does not match conv output {:?}", delta.shape(), g.output_shape()),
        ));
    }
    let (k, s) = (g.kernel, g.stride);
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut grad = vec![0.0; g.in_channels * plane_in];
    for oc in 0..g.out_channels {
        let d_plane = &delta.data[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..g.in_channels {
            let g_plane = &mut grad[ic * plane_in..(ic + 1) * plane_in];
            let kbase = (oc * g.in_channels + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let w = kernels.data[kbase + ky * k + kx];
                    for oy in 0..g.out_h {
                        let d_row = &d_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        let g_row = &mut g_plane[(oy * s + ky) * g.in_w..];
                        if s == 1 {
                            for (gv, &d) in g_row[kx..kx + g.out_w].iter_mut().zip(d_row) {
                                *gv += w * d;
                            }
                        } else {
                            for (ox, &d) in d_row.iter().enumerate() {
                                g_row[ox * s + kx] += w * d;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), grad))
}

/// Adjoint of [`conv2d`] with respect to its kernels.
pub fn conv2d_kernel_grad(x: &Tensor, delta: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    x.expect_rank(3, "conv2d_kernel_grad")?;
    delta.expect_rank(3, "conv2d_kernel_grad")?;
    let g = ConvGeometry::new(x.shape[0], delta.shape[0], x.shape[1], x.shape[2], kernel, stride)?;
    if delta.shape() != g.output_shape() {
        return Err(Error::dim(
            "conv2d_kernel_grad",
            format!("delta {:?} does not match conv output {:?}", delta.shape(), g.output_shape()),
        ));
    }
    let s = g.stride;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut grad = vec![0.0; g.out_channels * g.in_channels * kernel * kernel];
    for oc in 0..g.out_channels {
        let d_plane = &delta.data[oc * plane_out..(oc + 1) * plane_out];
        for ic in 0..g.in_channels {
            let in_plane = &x.data[ic * plane_in..(ic + 1) * plane_in];
            let kbase = (oc * g.in_channels + ic) * kernel * kernel;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let mut acc = 0.0;
                    for oy in 0..g.out_h {
                        let d_row = &d_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        let in_row = &in_plane[(oy * s + ky) * g.in_w..];
                        if s == 1 {
                            acc += d_row.iter().zip(&in_row[kx..kx + g.out_w]).map(|(d, v)| d * v).sum::<f64>();
                        } else {
                            for (ox, &d) in d_row.iter().enumerate() {
                                acc += d * in_row[ox * s + kx];
                            }
                        }
                    }
                    grad[kbase + ky * kernel + kx] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.kernel_shape().to_vec(), grad))
}

fn pool_extents(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need at least 2 spatial dims, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(op, format!("spatial extents {h}x{w} must be even")));
    }
    let channels = shape[..shape.len() - 2].iter().product();
    Ok((channels, h, w))
}

/// Non-overlapping 2×2 mean pooling over the last two axes.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pool_extents(x.shape(), "avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push(0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]));
            }
        }
    }
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`avg_pool2`]: each delta entry is spread as `delta / 4` over its window.
pub fn avg_pool2_grad(delta: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (c, h, w) = pool_extents(input_shape, "avg_pool2_grad")?;
    let (oh, ow) = (h / 2, w / 2);
    if delta.len() != c * oh * ow {
        return Err(Error::dim(
            "avg_pool2_grad",
            format!("delta {:?} does not match pooled {input_shape:?}", delta.shape()),
        ));
    }
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * delta.data[(ch * oh + oy) * ow + ox];
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                grad[base] = g;
                grad[base + 1] = g;
                grad[base + w] = g;
                grad[base + w + 1] = g;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), grad))
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Elementwise `min(hi, max(lo, x))`.
pub fn clip_box(x: &Tensor, lo: &Tensor, hi: &Tensor) -> Result<Tensor> {
    x.expect_same_shape(lo, "clip_box")?;
    x.expect_same_shape(hi, "clip_box")?;
    if let Some(i) = lo.data.iter().zip(&hi.data).position(|(l, h)| l > h) {
        return Err(Error::Contract {
            op: "clip_box",
            detail: format!("lower bound {} exceeds upper bound {} at index {i}", lo.data[i], hi.data[i]),
        });
    }
    let data = x
        .data
        .iter()
        .zip(lo.data.iter().zip(&hi.data))
        .map(|(&v, (&l, &h))| v.max(l).min(h))
        .collect();
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

pub fn l1_norm(x: &Tensor) -> f64 {
    x.data.iter().map(|v| v.abs()).sum()
}

/// I.i.d. uniform values on `[-scale, +scale]`.
pub fn uniform_init(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
