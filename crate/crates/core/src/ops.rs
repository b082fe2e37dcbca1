//! Forward operators and their gradient kernels.
//!
//! Convolution is cross-correlation with symmetric zero padding. Conv and
//! linear layers accumulate in `f64` and round once on store.

use serde::{Deserialize, Serialize};

use crate::error::{MimoError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `[out_channels, in_channels, kH, kW]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.rank() != 4 {
            return Err(MimoError::Config(format!(
                "conv weight must be rank 4, got {:?}",
                self.weight.shape()
            )));
        }
        if self.bias.shape() != [self.out_channels()] {
            return Err(MimoError::Shape {
                op: "conv bias",
                left: self.weight.shape().to_vec(),
                right: self.bias.shape().to_vec(),
            });
        }
        if self.stride == 0 {
            return Err(MimoError::Config("conv stride must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim(2), self.weight.dim(3))
    }

    /// Length of one flattened filter, `Cin·kH·kW`.
    pub fn fan_in(&self) -> usize {
        self.weight.len() / self.out_channels()
    }

    /// Spatial output extent for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Ok((
            out_extent(h, kh, self.stride, self.padding)?,
            out_extent(w, kw, self.stride, self.padding)?,
        ))
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k {
        return Err(MimoError::Config(format!(
            "kernel {k} larger than padded input {span}"
        )));
    }
    if !(span - k).is_multiple_of(stride) {
        return Err(MimoError::Config(format!(
            "non-integer output extent: ({n} + 2·{pad} − {k})/{stride} + 1"
        )));
    }
    Ok((span - k) / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f32,
}

impl BnParams {
    /// Identity statistics: `γ=1, β=0, μ=0, σ²=1`.
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.mean, &self.var] {
            if t.shape() != [c] {
                return Err(MimoError::Shape {
                    op: "batchnorm params",
                    left: self.gamma.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if !(self.eps > 0.0) || self.var.data().iter().any(|&v| v < 0.0) {
            return Err(MimoError::Config(
                "batchnorm requires eps > 0 and non-negative variances".into(),
            ));
        }
        Ok(())
    }

    /// Per-channel `γ_i / sqrt(σ²_i + ε)`.
    pub fn scales(&self) -> Vec<f64> {
        self.gamma
            .data()
            .iter()
            .zip(self.var.data())
            .map(|(&g, &v)| g as f64 / (v as f64 + self.eps as f64).sqrt())
            .collect()
    }

    /// Keep only the listed channels.
    pub fn select(&self, kept: &[usize]) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.gamma.select_axis0(kept)?,
            beta: self.beta.select_axis0(kept)?,
            mean: self.mean.select_axis0(kept)?,
            var: self.var.select_axis0(kept)?,
            eps: self.eps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// `[out_features, in_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(MimoError::Shape {
                op: "linear params",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(MimoError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![rank],
        });
    }
    Ok(())
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        expect_rank("conv2d input", input, 4)?;
        expect_rank("conv2d weight", weight, 4)?;
        let s = input.shape();
        let ws = weight.shape();
        if s[1] != ws[1] {
            return Err(MimoError::Shape {
                op: "conv2d",
                left: s.to_vec(),
                right: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(MimoError::Config("conv stride must be positive".into()));
        }
        let oh = out_extent(s[2], ws[2], stride, pad)?;
        let ow = out_extent(s[3], ws[3], stride, pad)?;
        Ok(ConvGeometry {
            n: s[0],
            cin: s[1],
            h: s[2],
            w: s[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds sample `x` (`[Cin,H,W]`) into `col` (`[Cin·kH·kW, H'·W']`).
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.p();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `dcol` back into the sample gradient `dx`.
    fn col2im(&self, dcol: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &dcol[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dx[base + jj as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Every receptive-field patch of `input` under `params`'s geometry, as
/// rows of length `Cin·kH·kW` in the same order as the flattened filters.
pub fn unfold_patches(input: &Tensor, params: &ConvParams) -> Result<Vec<Vec<f32>>> {
    let g = ConvGeometry::new(input, &params.weight, params.stride, params.padding)?;
    let (k, p) = (g.k(), g.p());
    let mut col = vec![0.0; k * p];
    let mut out = Vec::with_capacity(g.n * p);
    for x in input.data().chunks(g.cin * g.h * g.w) {
        g.im2col(x, &mut col);
        out.extend((0..p).map(|j| (0..k).map(|r| col[r * p + j]).collect()));
    }
    Ok(out)
}

/// 2-D cross-correlation plus per-output-channel bias.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_raw(
        input,
        &params.weight,
        &params.bias,
        params.stride,
        params.padding,
    )
}

pub(crate) fn conv2d_raw(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    if bias.shape() != [g.cout] {
        return Err(MimoError::Shape {
            op: "conv2d bias",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let (k, p) = (g.k(), g.p());
    let x = input.data();
    let wd = weight.data();
    let mut col = vec![0.0f32; k * p];
    let mut acc = vec![0.0f64; p];
    let mut out = vec![0.0f32; g.n * g.cout * p];
    for n in 0..g.n {
        g.im2col(
            &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w],
            &mut col,
        );
        for o in 0..g.cout {
            acc.fill(bias.data()[o] as f64);
            for (kk, &wv) in wd[o * k..(o + 1) * k].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let wv = wv as f64;
                for (a, &c) in acc.iter_mut().zip(&col[kk * p..(kk + 1) * p]) {
                    *a += wv * c as f64;
                }
            }
            let dst = &mut out[(n * g.cout + o) * p..(n * g.cout + o + 1) * p];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Tensor::from_vec(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let x = input.data();
    let wd = weight.data();
    let dy = grad_out.data();
    let sample = g.cin * g.h * g.w;
    let mut col = vec![0.0f32; k * p];
    let mut dcol = vec![0.0f64; k * p];
    let mut dw = vec![0.0f64; g.cout * k];
    let mut db = vec![0.0f64; g.cout];
    let mut dx = vec![0.0f64; g.n * sample];
    for n in 0..g.n {
        g.im2col(&x[n * sample..(n + 1) * sample], &mut col);
        dcol.fill(0.0);
        for o in 0..g.cout {
            let dyo = &dy[(n * g.cout + o) * p..(n * g.cout + o + 1) * p];
            db[o] += dyo.iter().map(|&v| v as f64).sum::<f64>();
            for kk in 0..k {
                let crow = &col[kk * p..(kk + 1) * p];
                let s: f64 = dyo
                    .iter()
                    .zip(crow)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                dw[o * k + kk] += s;
                let wv = wd[o * k + kk] as f64;
                if wv != 0.0 {
                    for (d, &v) in dcol[kk * p..(kk + 1) * p].iter_mut().zip(dyo) {
                        *d += wv * v as f64;
                    }
                }
            }
        }
        g.col2im(&dcol, &mut dx[n * sample..(n + 1) * sample]);
    }
    Ok((
        Tensor::from_vec(input.shape().to_vec(), to_f32(dx))?,
        Tensor::from_vec(weight.shape().to_vec(), to_f32(dw))?,
        Tensor::from_vec(vec![g.cout], to_f32(db))?,
    ))
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn bn_check(input: &Tensor, params: &BnParams) -> Result<()> {
    if input.rank() < 2 || input.dim(1) != params.channels() {
        return Err(MimoError::Shape {
            op: "batchnorm",
            left: input.shape().to_vec(),
            right: params.gamma.shape().to_vec(),
        });
    }
    params.validate()
}

/// Inference-mode batch normalization with stored statistics:
/// `γ_i·(x − μ_i)/sqrt(σ²_i + ε) + β_i`.
pub fn batchnorm_infer(input: &Tensor, params: &BnParams) -> Result<Tensor> {
    bn_check(input, params)?;
    let c = params.channels();
    let inner: usize = input.shape()[2..].iter().product();
    let scales = params.scales();
    let mut out = input.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let ch = idx % c;
        let s = scales[ch];
        let m = params.mean.data()[ch] as f64;
        let b = params.beta.data()[ch] as f64;
        for v in chunk {
            *v = (s * (*v as f64 - m) + b) as f32;
        }
    }
    Ok(out)
}

/// Gradients of [`batchnorm_infer`] w.r.t. input, γ and β.
pub(crate) fn batchnorm_backward(
    input: &Tensor,
    params: &BnParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    bn_check(input, params)?;
    let c = params.channels();
    let inner: usize = input.shape()[2..].iter().product();
    let inv: Vec<f64> = params
        .var
        .data()
        .iter()
        .map(|&v| 1.0 / (v as f64 + params.eps as f64).sqrt())
        .collect();
    let mut dx = grad_out.clone();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (idx, (dchunk, xchunk)) in dx
        .data_mut()
        .chunks_mut(inner)
        .zip(input.data().chunks(inner))
        .enumerate()
    {
        let ch = idx % c;
        let g = params.gamma.data()[ch] as f64;
        let m = params.mean.data()[ch] as f64;
        for (d, &x) in dchunk.iter_mut().zip(xchunk) {
            let dy = *d as f64;
            dgamma[ch] += dy * (x as f64 - m) * inv[ch];
            dbeta[ch] += dy;
            *d = (dy * g * inv[ch]) as f32;
        }
    }
    Ok((
        dx,
        Tensor::from_vec(vec![c], to_f32(dgamma))?,
        Tensor::from_vec(vec![c], to_f32(dbeta))?,
    ))
}

/// `output[n,g] = Σ_f input[n,f]·weight[g,f] + bias[g]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("linear input", input, 2)?;
    expect_rank("linear weight", weight, 2)?;
    let (n, f) = (input.dim(0), input.dim(1));
    let g = weight.dim(0);
    if weight.dim(1) != f || bias.shape() != [g] {
        return Err(MimoError::Shape {
            op: "linear",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * g);
    for row in x.chunks(f) {
        for (j, wrow) in w.chunks(f).enumerate() {
            let s: f64 = row
                .iter()
                .zip(wrow)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            out.push((s + bias.data()[j] as f64) as f32);
        }
    }
    Tensor::from_vec(vec![n, g], out)
}

/// Gradients of [`linear`] w.r.t. input, weight and bias.
pub(crate) fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = (input.dim(0), input.dim(1));
    let g = weight.dim(0);
    let x = input.data();
    let w = weight.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0f64; n * f];
    let mut dw = vec![0.0f64; g * f];
    let mut db = vec![0.0f64; g];
    for i in 0..n {
        for j in 0..g {
            let d = dy[i * g + j] as f64;
            if d == 0.0 {
                continue;
            }
            db[j] += d;
            for k in 0..f {
                dx[i * f + k] += d * w[j * f + k] as f64;
                dw[j * f + k] += d * x[i * f + k] as f64;
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, f], to_f32(dx))?,
        Tensor::from_vec(vec![g, f], to_f32(dw))?,
        Tensor::from_vec(vec![g], to_f32(db))?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(MimoError::Shape {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

/// Stacks `b` after `a` along axis 1. Works for `[N,C,H,W]` maps and
/// `[N,F]` feature vectors alike.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let compatible = a.rank() >= 2
        && a.rank() == b.rank()
        && a.dim(0) == b.dim(0)
        && a.shape()[2..] == b.shape()[2..];
    if !compatible {
        return Err(MimoError::Shape {
            op: "concat_channels",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.dim(0);
    let sa = a.len() / n;
    let sb = b.len() / n;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.dim(1);
    Tensor::from_vec(shape, data)
}

/// Splits a gradient of [`concat_channels`] back into its two parts.
pub(crate) fn split_channels(grad: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let n = grad.dim(0);
    let c = grad.dim(1);
    let inner: usize = grad.shape()[2..].iter().product();
    let mut da = Vec::with_capacity(n * ca * inner);
    let mut db = Vec::with_capacity(n * (c - ca) * inner);
    for chunk in grad.data().chunks(c * inner) {
        da.extend_from_slice(&chunk[..ca * inner]);
        db.extend_from_slice(&chunk[ca * inner..]);
    }
    let mut sa = grad.shape().to_vec();
    sa[1] = ca;
    let mut sb = grad.shape().to_vec();
    sb[1] = c - ca;
    Ok((Tensor::from_vec(sa, da)?, Tensor::from_vec(sb, db)?))
}

/// Spatial mean per channel: `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    expect_rank("global_avg_pool", input, 4)?;
    let (n, c) = (input.dim(0), input.dim(1));
    let inner = input.dim(2) * input.dim(3);
    let data = input
        .data()
        .chunks(inner)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
        .collect();
    Tensor::from_vec(vec![n, c], data)
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let inner = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(grad.len() * inner);
    for &g in grad.data() {
        let v = g / inner as f32;
        data.extend(std::iter::repeat_n(v, inner));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}
