//! Dense NCHW tensors and the handful of deterministic kernels the network
//! needs: direct convolution, 2x transposed convolution, group norm,
//! bilinear resizing, activations and elementwise addition.
//!
//! Every kernel is a pure function. Convolutions accumulate each output
//! element in `f64` in a fixed `(in_ch, ky, kx)` order, add the bias last and
//! round once to `f32`, so results are bitwise reproducible regardless of how
//! the work is split across threads (parallelism is only ever across output
//! elements).

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Extent of a rank-4 tensor in `(batch, channels, height, width)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn to_vec(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width)
    }
}

/// Row-major rank-4 `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.batch == 0 || dims.channels == 0 || dims.height == 0 || dims.width == 0 {
            return Err(Error::invalid("tensor", format!("all dims must be >= 1, got {dims}")));
        }
        if data.len() != dims.numel() {
            return Err(Error::shape("tensor", format!("{} values for {dims}", dims.numel()), data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor from a dynamic shape, which must have rank 4.
    pub fn from_shape(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        match *shape {
            [b, c, h, w] => Self::new(Dims::new(b, c, h, w), data),
            _ => Err(Error::shape("tensor", "rank 4", format!("rank {}", shape.len()))),
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        assert!(dims.numel() > 0, "tensor dims must be >= 1, got {dims}");
        Self { dims, data: vec![value; dims.numel()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.numel());
        for b in 0..dims.batch {
            for c in 0..dims.channels {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let d = &self.dims;
        ((b * d.channels + c) * d.height + y) * d.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    /// The `height * width` slice for one `(batch, channel)` pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let start = self.index(b, c, 0, 0);
        &self.data[start..start + self.dims.plane()]
    }

    /// Copies batch item `b` out as a batch-1 tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let len = self.dims.channels * self.dims.plane();
        Tensor { dims: Dims { batch: 1, ..self.dims }, data: self.data[b * len..(b + 1) * len].to_vec() }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Weights of a convolution: `weight` has dims `(out_ch, in_ch, kh, kw)`.
///
/// The same layout is used for the 2x transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    weight: Tensor,
    bias: Vec<f32>,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let d = weight.dims();
        if !(1..=3).contains(&d.height) || !(1..=3).contains(&d.width) {
            return Err(Error::invalid(
                "conv params",
                format!("kernel must be 1..=3 on each side, got {}x{}", d.height, d.width),
            ));
        }
        if bias.len() != d.batch {
            return Err(Error::shape("conv params", format!("bias of {}", d.batch), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    /// Zero weights and bias.
    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        Self { weight: Tensor::zeros(Dims::new(out_ch, in_ch, kh, kw)), bias: vec![0.0; out_ch] }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims().channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims().height, self.weight.dims().width)
    }
}

/// Output extent of a convolution along one axis, `None` if the kernel does
/// not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Direct 2-D convolution with symmetric zero padding.
pub fn conv2d(input: &Tensor, params: &ConvParams, stride: usize, padding: usize) -> Result<Tensor> {
    let d = input.dims();
    if d.channels != params.in_channels() {
        return Err(Error::shape(
            "conv2d",
            format!("input with {} channels for weight {}", params.in_channels(), params.weight.dims()),
            d,
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let (kh, kw) = params.kernel();
    let (Some(oh), Some(ow)) =
        (conv_out_len(d.height, kh, stride, padding), conv_out_len(d.width, kw, stride, padding))
    else {
        return Err(Error::shape("conv2d", format!("spatial extent >= kernel {kh}x{kw}"), d));
    };
    let out_ch = params.out_channels();
    let out_dims = Dims::new(d.batch, out_ch, oh, ow);
    let mut out = vec![0.0f32; out_dims.numel()];
    let geom = ConvGeom {
        in_ch: d.channels,
        kh,
        kw,
        stride,
        padded_w: d.width + 2 * padding,
        padded_plane: (d.height + 2 * padding) * (d.width + 2 * padding),
        oh,
        ow,
    };
    let plane = oh * ow;
    for (b, out_batch) in out.chunks_mut(out_ch * plane).enumerate() {
        let padded = pad_to_f64(&input.batch_item(b), padding);
        out_batch.par_chunks_mut(OC_BLOCK * plane).enumerate().for_each(|(blk, chunk)| {
            let oc0 = blk * OC_BLOCK;
            let n = chunk.len() / plane;
            if n == OC_BLOCK {
                conv_block::<OC_BLOCK>(&geom, &padded, params, oc0, chunk);
            } else {
                for (i, one) in chunk.chunks_mut(plane).enumerate() {
                    conv_block::<1>(&geom, &padded, params, oc0 + i, one);
                }
            }
        });
    }
    Tensor::new(out_dims, out)
}

/// Output channels and columns computed together by the conv micro-kernel.
const OC_BLOCK: usize = 4;
const OX_BLOCK: usize = 4;

struct ConvGeom {
    in_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padded_w: usize,
    padded_plane: usize,
    oh: usize,
    ow: usize,
}

/// Zero-padded copy of a batch-1 tensor in f64.
fn pad_to_f64(t: &Tensor, padding: usize) -> Vec<f64> {
    let d = t.dims();
    let (ph, pw) = (d.height + 2 * padding, d.width + 2 * padding);
    let mut out = vec![0.0f64; d.channels * ph * pw];
    for c in 0..d.channels {
        let src = t.plane(0, c);
        for y in 0..d.height {
            let dst = &mut out[c * ph * pw + (y + padding) * pw + padding..][..d.width];
            for (o, &v) in dst.iter_mut().zip(&src[y * d.width..(y + 1) * d.width]) {
                *o = f64::from(v);
            }
        }
    }
    out
}

/// Computes output channels `oc0..oc0 + OC` into `out` (`OC` planes).
///
/// Every output element sums its taps in (ic, ky, kx) order starting from
/// +0.0. Padding taps add `w * 0.0`, which leaves a sum that is never -0.0
/// unchanged, so results equal a loop that skips out-of-range taps.
fn conv_block<const OC: usize>(g: &ConvGeom, padded: &[f64], params: &ConvParams, oc0: usize, out: &mut [f32]) {
    let taps = g.in_ch * g.kh * g.kw;
    let wdata = params.weight.data();
    // weights interleaved by output channel: wb[tap * OC + o]
    let mut wb = vec![0.0f64; taps * OC];
    for o in 0..OC {
        for t in 0..taps {
            wb[t * OC + o] = f64::from(wdata[(oc0 + o) * taps + t]);
        }
    }
    let bias: [f64; OC] = std::array::from_fn(|o| f64::from(params.bias[oc0 + o]));
    match (g.kw, g.stride) {
        (1, 1) => conv_rows::<OC, 1, 1>(g, padded, &wb, &bias, out),
        (2, 1) => conv_rows::<OC, 2, 1>(g, padded, &wb, &bias, out),
        (3, 1) => conv_rows::<OC, 3, 1>(g, padded, &wb, &bias, out),
        (1, 2) => conv_rows::<OC, 1, 2>(g, padded, &wb, &bias, out),
        (2, 2) => conv_rows::<OC, 2, 2>(g, padded, &wb, &bias, out),
        (3, 2) => conv_rows::<OC, 3, 2>(g, padded, &wb, &bias, out),
        _ => conv_rows_any::<OC>(g, padded, &wb, &bias, out),
    }
}

fn conv_rows<const OC: usize, const KW: usize, const S: usize>(
    g: &ConvGeom,
    padded: &[f64],
    wb: &[f64],
    bias: &[f64; OC],
    out: &mut [f32],
) {
    let full = g.ow - g.ow % OX_BLOCK;
    for oy in 0..g.oh {
        for ox in (0..full).step_by(OX_BLOCK) {
            let acc = conv_tile::<OC, OX_BLOCK, KW, S>(g, padded, wb, oy, ox);
            store_tile(g, &acc, bias, oy, ox, out);
        }
        for ox in full..g.ow {
            let acc = conv_tile::<OC, 1, KW, S>(g, padded, wb, oy, ox);
            store_tile(g, &acc, bias, oy, ox, out);
        }
    }
}

/// Fallback for strides above 2.
fn conv_rows_any<const OC: usize>(g: &ConvGeom, padded: &[f64], wb: &[f64], bias: &[f64; OC], out: &mut [f32]) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let mut acc = [[0.0f64; 1]; OC];
            let mut tap = 0;
            for ic in 0..g.in_ch {
                for ky in 0..g.kh {
                    let row = ic * g.padded_plane + (oy * g.stride + ky) * g.padded_w + ox * g.stride;
                    for kx in 0..g.kw {
                        let v = padded[row + kx];
                        for o in 0..OC {
                            acc[o][0] += wb[tap * OC + o] * v;
                        }
                        tap += 1;
                    }
                }
            }
            store_tile(g, &acc, bias, oy, ox, out);
        }
    }
}

#[inline(always)]
fn store_tile<const OC: usize, const OX: usize>(
    g: &ConvGeom,
    acc: &[[f64; OX]; OC],
    bias: &[f64; OC],
    oy: usize,
    ox: usize,
    out: &mut [f32],
) {
    let plane = g.oh * g.ow;
    for o in 0..OC {
        for j in 0..OX {
            out[o * plane + oy * g.ow + ox + j] = (acc[o][j] + bias[o]) as f32;
        }
    }
}

#[inline(always)]
fn conv_tile<const OC: usize, const OX: usize, const KW: usize, const S: usize>(
    g: &ConvGeom,
    padded: &[f64],
    wb: &[f64],
    oy: usize,
    ox0: usize,
) -> [[f64; OX]; OC] {
    let mut acc = [[0.0f64; OX]; OC];
    let row_len = (OX - 1) * S + KW;
    let weights = &wb[..g.in_ch * g.kh * KW * OC];
    let mut taps = weights.chunks_exact(KW * OC);
    for ic in 0..g.in_ch {
        let plane = &padded[ic * g.padded_plane..(ic + 1) * g.padded_plane];
        for ky in 0..g.kh {
            let start = (oy * S + ky) * g.padded_w + ox0 * S;
            let row = &plane[start..start + row_len];
            let w = taps.next().expect("tap weights");
            for kx in 0..KW {
                for j in 0..OX {
                    let v = row[j * S + kx];
                    for o in 0..OC {
                        acc[o][j] += w[kx * OC + o] * v;
                    }
                }
            }
        }
    }
    acc
}

/// 2x2 stride-2 transposed convolution; doubles the spatial extent.
///
/// Kernels do not overlap at stride 2, so each output pixel receives exactly
/// one tap per input channel: `out[oc, 2y+ky, 2x+kx] = bias[oc] +
/// sum_ic in[ic, y, x] * w[oc, ic, ky, kx]`.
pub fn deconv2x(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let d = input.dims();
    if params.kernel() != (2, 2) {
        let (kh, kw) = params.kernel();
        return Err(Error::shape("deconv2x", "2x2 kernel", format!("{kh}x{kw} kernel")));
    }
    if d.channels != params.in_channels() {
        return Err(Error::shape(
            "deconv2x",
            format!("input with {} channels for weight {}", params.in_channels(), params.weight.dims()),
            d,
        ));
    }
    let out_ch = params.out_channels();
    let out_dims = Dims::new(d.batch, out_ch, d.height * 2, d.width * 2);
    let mut out = vec![0.0f32; out_dims.numel()];
    let wdata = params.weight.data();
    let (h, w) = (d.height, d.width);

    out.par_chunks_mut(4 * h * w).enumerate().for_each_init(
        || vec![0.0f64; 4 * h * w],
        |acc, (plane_idx, out_plane)| {
            let b = plane_idx / out_ch;
            let oc = plane_idx % out_ch;
            acc.fill(0.0);
            for ic in 0..d.channels {
                let in_plane = input.plane(b, ic);
                let base = (oc * d.channels + ic) * 4;
                for ky in 0..2 {
                    for kx in 0..2 {
                        let wk = f64::from(wdata[base + ky * 2 + kx]);
                        for y in 0..h {
                            let row = &mut acc[(2 * y + ky) * 2 * w..(2 * y + ky + 1) * 2 * w];
                            for (x, &v) in in_plane[y * w..(y + 1) * w].iter().enumerate() {
                                row[2 * x + kx] += wk * f64::from(v);
                            }
                        }
                    }
                }
            }
            let bias = f64::from(params.bias[oc]);
            for (o, &a) in out_plane.iter_mut().zip(acc.iter()) {
                *o = (a + bias) as f32;
            }
        },
    );
    Tensor::new(out_dims, out)
}

/// Default number of groups for group normalization.
pub const GROUP_NORM_GROUPS: usize = 32;
/// Default epsilon for group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization with per-channel affine parameters. Statistics are the
/// population mean and variance over each group's channels and pixels.
pub fn group_norm(input: &Tensor, groups: usize, gamma: &[f32], beta: &[f32], epsilon: f64) -> Result<Tensor> {
    let d = input.dims();
    if groups == 0 || !d.channels.is_multiple_of(groups) {
        return Err(Error::invalid(
            "group_norm",
            format!("{} channels not divisible into {groups} groups", d.channels),
        ));
    }
    if gamma.len() != d.channels || beta.len() != d.channels {
        return Err(Error::shape(
            "group_norm",
            format!("gamma/beta of {}", d.channels),
            format!("{}/{}", gamma.len(), beta.len()),
        ));
    }
    let per_group = d.channels / groups;
    let group_len = per_group * d.plane();
    let mut out = input.data.clone();
    out.par_chunks_mut(group_len).enumerate().for_each(|(idx, chunk)| {
        let g = idx % groups;
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = chunk
            .iter()
            .map(|&v| {
                let dv = f64::from(v) - mean;
                dv * dv
            })
            .sum::<f64>()
            / n;
        let inv_std = 1.0 / (var + epsilon).sqrt();
        for (ci, plane) in chunk.chunks_mut(d.plane()).enumerate() {
            let c = g * per_group + ci;
            let (gm, bt) = (f64::from(gamma[c]), f64::from(beta[c]));
            for v in plane {
                *v = (gm * (f64::from(*v) - mean) * inv_std + bt) as f32;
            }
        }
    });
    Tensor::new(d, out)
}

/// Source coordinate and blend weights for one bilinear output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(in_len: usize, out_len: usize, align_corners: bool) -> Vec<Tap> {
    (0..out_len)
        .map(|o| {
            let src = if align_corners {
                if out_len > 1 {
                    o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                } else {
                    0.0
                }
            } else {
                ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0)
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resampling of every plane to `out_h x out_w`.
///
/// With `align_corners == false` (the convention used throughout the
/// network) pixel centers sit at half-integer coordinates: output pixel `o`
/// samples source coordinate `(o + 0.5) * in / out - 0.5`, clamped at 0 and at
/// the last pixel.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", format!("output size {out_h}x{out_w}")));
    }
    let d = input.dims();
    let ys = bilinear_taps(d.height, out_h, align_corners);
    let xs = bilinear_taps(d.width, out_w, align_corners);
    let out_dims = Dims::new(d.batch, d.channels, out_h, out_w);
    let mut out = vec![0.0f32; out_dims.numel()];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(p, plane)| {
        let src = &input.data[p * d.plane()..(p + 1) * d.plane()];
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &src[ty.lo * d.width..(ty.lo + 1) * d.width];
            let r1 = &src[ty.hi * d.width..(ty.hi + 1) * d.width];
            for (ox, tx) in xs.iter().enumerate() {
                // a + (b - a) t reproduces equal endpoints exactly
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let top = lerp(f64::from(r0[tx.lo]), f64::from(r0[tx.hi]), tx.frac);
                let bot = lerp(f64::from(r1[tx.lo]), f64::from(r1[tx.hi]), tx.frac);
                plane[oy * out_w + ox] = lerp(top, bot, ty.frac) as f32;
            }
        }
    });
    Tensor::new(out_dims, out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let d = input.dims();
    let out_dims = Dims::new(d.batch, d.channels, d.height * 2, d.width * 2);
    Tensor::from_fn(out_dims, |b, c, y, x| input.at(b, c, y / 2, x / 2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Softmax across the channel axis, independently at every pixel.
    SoftmaxChannel,
}

pub fn activate(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => relu(input.clone()),
        Activation::SoftmaxChannel => softmax_channel(input),
    }
}

/// In-place ReLU on an owned tensor. Never produces `-0.0`.
pub fn relu(mut t: Tensor) -> Tensor {
    for v in &mut t.data {
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
    t
}

fn softmax_channel(input: &Tensor) -> Tensor {
    let d = input.dims();
    let plane = d.plane();
    let mut out = input.data.clone();
    let mut logits = vec![0.0f64; d.channels];
    for b in 0..d.batch {
        let base = b * d.channels * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (c, l) in logits.iter_mut().enumerate() {
                *l = f64::from(input.data[base + c * plane + p]);
                max = max.max(*l);
            }
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            for (c, l) in logits.iter().enumerate() {
                out[base + c * plane + p] = (l / sum) as f32;
            }
        }
    }
    Tensor { dims: d, data: out }
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

/// Elementwise sum of two equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims != b.dims {
        return Err(Error::shape("add", a.dims, b.dims));
    }
    Ok(Tensor { dims: a.dims, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() })
}

/// Sums a non-empty list of equally shaped tensors left to right.
pub fn add_all(first: Tensor, rest: &[&Tensor]) -> Result<Tensor> {
    let mut acc = first;
    for t in rest {
        if acc.dims != t.dims {
            return Err(Error::shape("add", acc.dims, t.dims));
        }
        for (x, y) in acc.data.iter_mut().zip(&t.data) {
            *x += y;
        }
    }
    Ok(acc)
}
