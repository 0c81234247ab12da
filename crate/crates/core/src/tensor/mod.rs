//! Dense row-major `f32` tensors and the kernels the rest of the crate is
//! built from.
//!
//! Spatial tensors are `B×C×H×W`; sequence tensors are `B×N×C`. Blocks keep
//! activations channels-last (`B×H×W×C`), which is a free reshape of the
//! sequence form.

pub(crate) mod file;

pub use file::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, TENSOR_MAGIC};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "shape {shape:?} has a zero dimension"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.numel() {
            out.push(self.data[offset]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                offset += src_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                offset -= src_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// `B×C×H×W` to `B×H×W×C`.
    pub fn to_channels_last(&self) -> Result<Self> {
        self.expect_rank(4, "to_channels_last")?;
        self.permute(&[0, 2, 3, 1])
    }

    /// `B×H×W×C` to `B×C×H×W`.
    pub fn to_channels_first(&self) -> Result<Self> {
        self.expect_rank(4, "to_channels_first")?;
        self.permute(&[0, 3, 1, 2])
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "max_abs_diff: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub(crate) fn expect_rank(&self, rank: usize, op: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::dim(format!(
                "{op} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strided single-precision GEMM: `c = a·b (+ c when accumulate)`.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`, each addressed by row and column
/// strides so transposed and column-sliced operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every operand extent was bounds-checked above, and `c` is a
    // unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Matrix product of `M×K` and `K×N` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out, (n, 1), false);
    Tensor::new(vec![m, n], out)
}

/// Applies `x·W (+ bias)` over the last axis of `x`, where `W` is `in×out`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.rank() != 2 || x.last_dim() != weight.shape[0] {
        return Err(Error::dim(format!(
            "linear: input {:?} does not match weight {:?}",
            x.shape, weight.shape
        )));
    }
    let (fan_in, fan_out) = (weight.shape[0], weight.shape[1]);
    if let Some(b) = bias {
        if b.shape != [fan_out] {
            return Err(Error::dim(format!(
                "linear: bias {:?} does not match {fan_out} outputs",
                b.shape
            )));
        }
    }
    let rows = x.numel() / fan_in;
    let mut out = match bias {
        Some(b) => b.data.repeat(rows),
        None => vec![0.0; rows * fan_out],
    };
    gemm(
        rows,
        fan_in,
        fan_out,
        &x.data,
        (fan_in, 1),
        &weight.data,
        (fan_out, 1),
        &mut out,
        (fan_out, 1),
        bias.is_some(),
    );
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = fan_out;
    Tensor::new(shape, out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out.data, x.last_dim());
    out
}

pub(crate) fn softmax_rows_in_place(data: &mut [f32], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += f64::from(*v);
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Layer normalization over the last (channel) axis. Statistics are
/// accumulated in `f64`; the variance is the biased (population) estimate.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: Option<&Tensor>, eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.shape != [c] {
        return Err(Error::dim(format!(
            "layernorm: gamma {:?} does not match {c} channels of {:?}",
            gamma.shape, x.shape
        )));
    }
    if let Some(b) = beta {
        if b.shape != [c] {
            return Err(Error::dim(format!(
                "layernorm: beta {:?} does not match {c} channels",
                b.shape
            )));
        }
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config(format!("layernorm: eps must be positive, got {eps}")));
    }
    let mut out = vec![0.0f32; x.numel()];
    for (src, dst) in x.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64;
        let var = src
            .iter()
            .map(|&v| {
                let d = f64::from(v) - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for (i, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
            *d = ((f64::from(s) - mean) * inv) as f32 * gamma.data[i];
        }
        if let Some(b) = beta {
            dst.iter_mut().zip(&b.data).for_each(|(d, &b)| *d += b);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Output length of a strided, zero-padded window along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::dim(format!(
            "kernel ({kernel}) and stride ({stride}) must be positive"
        )));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} larger than padded input {padded} (input {input}, padding {padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Zero-padded 2-D cross-correlation of `B×C_in×H×W` input with a
/// `C_out×(C_in/groups)×k×k` kernel.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    x.expect_rank(4, "conv2d input")?;
    weight.expect_rank(4, "conv2d weight")?;
    let (batch, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (c_out, c_in_g, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::dim(format!(
            "conv2d: {c_in} input / {c_out} output channels not divisible by {groups} groups"
        )));
    }
    if c_in_g != c_in / groups || kh != kw {
        return Err(Error::dim(format!(
            "conv2d: weight {:?} incompatible with input {:?} and {groups} groups",
            weight.shape, x.shape
        )));
    }
    if let Some(b) = bias {
        if b.shape != [c_out] {
            return Err(Error::dim(format!(
                "conv2d: bias {:?} does not match {c_out} output channels",
                b.shape
            )));
        }
    }
    let k = kh;
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(w, k, stride, padding)?;
    let mut out = vec![0.0f32; batch * c_out * oh * ow];

    if groups == c_in && c_out == c_in {
        depthwise(x, weight, stride, padding, oh, ow, &mut out);
    } else {
        let c_out_g = c_out / groups;
        let patch = c_in_g * k * k;
        let positions = oh * ow;
        let mut cols = vec![0.0f32; patch * positions];
        for b in 0..batch {
            for g in 0..groups {
                im2col(x, b, g * c_in_g, c_in_g, k, stride, padding, oh, ow, &mut cols);
                let w_off = g * c_out_g * patch;
                let o_off = (b * c_out + g * c_out_g) * positions;
                gemm(
                    c_out_g,
                    patch,
                    positions,
                    &weight.data[w_off..],
                    (patch, 1),
                    &cols,
                    (positions, 1),
                    &mut out[o_off..],
                    (positions, 1),
                    false,
                );
            }
        }
    }
    if let Some(bias) = bias {
        for plane in out.chunks_exact_mut(oh * ow).enumerate() {
            let (idx, plane) = plane;
            let v = bias.data[idx % c_out];
            plane.iter_mut().for_each(|p| *p += v);
        }
    }
    Tensor::new(vec![batch, c_out, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Tensor,
    b: usize,
    c_start: usize,
    channels: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let (c_in, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let positions = oh * ow;
    for c in 0..channels {
        let plane = &x.data[((b * c_in) + c_start + c) * h * w..][..h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * positions..][..positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst = &mut row[oy * ow..][..ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn depthwise(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let (batch, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let k = weight.shape[2];
    for b in 0..batch {
        for ch in 0..c {
            let plane = &x.data[(b * c + ch) * h * w..][..h * w];
            let kernel = &weight.data[ch * k * k..][..k * k];
            let dst = &mut out[(b * c + ch) * oh * ow..][..oh * ow];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = kernel[ki * k + kj];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let row = &mut dst[oy * ow..][..ow];
                        // Valid ox satisfy 0 <= ox*stride + kj - padding < w.
                        let lo = padding.saturating_sub(kj).div_ceil(stride);
                        let hi = ((w + padding).saturating_sub(kj)).div_ceil(stride).min(ow);
                        for ox in lo..hi {
                            row[ox] += wv * src[ox * stride + kj - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Average pooling over `k×k` windows. Padded positions are excluded from
/// the divisor (`count_include_pad = false`).
pub fn avgpool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    x.expect_rank(4, "avgpool2d")?;
    let (batch, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(w, k, stride, padding)?;
    let mut out = vec![0.0f32; batch * c * oh * ow];
    for (plane, dst) in x.data.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                let mut sum = 0.0f32;
                for iy in ys.clone() {
                    sum += plane[iy * w + xs.start..iy * w + xs.end].iter().sum::<f32>();
                }
                // The window always overlaps the input because padding < k.
                let count = (ys.len() * xs.len()).max(1);
                dst[oy * ow + ox] = sum / count as f32;
            }
        }
    }
    Tensor::new(vec![batch, c, oh, ow], out)
}

/// Mean over the spatial axes of `B×C×H×W`, giving `B×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(4, "global_avg_pool")?;
    let (batch, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let data = x
        .data
        .chunks_exact(h * w)
        .map(|plane| (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64) as f32)
        .collect();
    Tensor::new(vec![batch, c], data)
}
