//! Post-training affine quantization of weights to int8 / int4.
//!
//! For a group of weights `W` with range `[min, max]`:
//!
//! ```text
//! code = round((w − min) / (max − min) · levels) − offset
//! ŵ    = (code + offset) / levels · (max − min) + min
//! ```
//!
//! with `levels = 255, offset = 128` for int8 and `levels = 15, offset = 8`
//! for int4. Rounding is half-away-from-zero. A group with `max == min`
//! stores code 0 everywhere and dequantizes to the constant.

use serde::{Deserialize, Serialize};

use crate::error::{MimoError, Result};
use crate::graph::{ConvLayer, ModelGraph, NodeKind};
use crate::ops::{ConvParams, LinearParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bits {
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "int4")]
    Int4,
}

impl Bits {
    pub fn from_width(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(Bits::Int8),
            4 => Ok(Bits::Int4),
            other => Err(MimoError::Config(format!("unsupported bit width {other}"))),
        }
    }

    pub fn width(self) -> u32 {
        match self {
            Bits::Int8 => 8,
            Bits::Int4 => 4,
        }
    }

    pub fn levels(self) -> i32 {
        match self {
            Bits::Int8 => 255,
            Bits::Int4 => 15,
        }
    }

    pub fn offset(self) -> i32 {
        match self {
            Bits::Int8 => 128,
            Bits::Int4 => 8,
        }
    }

    pub fn code_range(self) -> (i8, i8) {
        match self {
            Bits::Int8 => (-128, 127),
            Bits::Int4 => (-8, 7),
        }
    }

    /// Storage bytes for `n` packed codes.
    pub fn packed_bytes(self, n: usize) -> usize {
        match self {
            Bits::Int8 => n,
            Bits::Int4 => n.div_ceil(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

impl std::str::FromStr for Granularity {
    type Err = MimoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" | "per_tensor" => Ok(Granularity::PerTensor),
            "channel" | "per_channel" => Ok(Granularity::PerChannel),
            other => Err(MimoError::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub w_min: f32,
    pub w_max: f32,
    pub bits: Bits,
}

impl QuantParams {
    pub fn for_values(values: &[f32], bits: Bits) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        QuantParams {
            w_min: lo,
            w_max: hi,
            bits,
        }
    }

    /// Width of one quantization step, `(max − min)/levels`.
    pub fn step(&self) -> f64 {
        (self.w_max as f64 - self.w_min as f64) / self.bits.levels() as f64
    }

    pub fn quantize(&self, w: f32) -> i8 {
        let range = self.w_max as f64 - self.w_min as f64;
        if range <= 0.0 {
            return 0;
        }
        let levels = self.bits.levels() as f64;
        let t = ((w as f64 - self.w_min as f64) / range * levels).clamp(0.0, levels);
        // f64::round is half-away-from-zero
        let code = t.round() as i32 - self.bits.offset();
        let (lo, hi) = self.bits.code_range();
        code.clamp(lo as i32, hi as i32) as i8
    }

    pub fn dequantize(&self, code: i8) -> Result<f32> {
        let (lo, hi) = self.bits.code_range();
        if code < lo || code > hi {
            return Err(MimoError::Corrupt(format!(
                "code {code} outside {lo}..={hi} for {} bits",
                self.bits.width()
            )));
        }
        let range = self.w_max as f64 - self.w_min as f64;
        if range <= 0.0 {
            return Ok(self.w_min);
        }
        let idx = (code as i32 + self.bits.offset()) as f64;
        let levels = self.bits.levels() as f64;
        if idx == levels {
            return Ok(self.w_max);
        }
        Ok((idx / levels * range + self.w_min as f64) as f32)
    }
}

/// Integer codes with one [`QuantParams`] per contiguous group. A single
/// group is per-tensor quantization; one group per leading-axis slice is
/// per-channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub groups: Vec<QuantParams>,
    #[serde(skip)]
    pub codes: Vec<i8>,
}

impl QuantTensor {
    pub fn bits(&self) -> Bits {
        self.groups[0].bits
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn group_len(&self) -> usize {
        self.len() / self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || !self.len().is_multiple_of(self.groups.len()) {
            return Err(MimoError::Corrupt(format!(
                "{} quantization groups do not tile shape {:?}",
                self.groups.len(),
                self.shape
            )));
        }
        if self.codes.len() != self.len() {
            return Err(MimoError::Corrupt(format!(
                "{} codes for shape {:?}",
                self.codes.len(),
                self.shape
            )));
        }
        let bits = self.bits();
        if self
            .groups
            .iter()
            .any(|g| g.bits != bits || !(g.w_max >= g.w_min))
        {
            return Err(MimoError::Corrupt(
                "inconsistent quantization groups".into(),
            ));
        }
        let (lo, hi) = bits.code_range();
        if let Some(c) = self.codes.iter().find(|&&c| c < lo || c > hi) {
            return Err(MimoError::Corrupt(format!("code {c} out of range")));
        }
        Ok(())
    }

    /// Storage bytes of the codes (int4 packs two per byte).
    pub fn code_bytes(&self) -> usize {
        self.bits().packed_bytes(self.len())
    }

    /// Packs codes for serialization: int8 one per byte, int4 two per byte
    /// with the low nibble first.
    pub fn pack(&self) -> Vec<u8> {
        match self.bits() {
            Bits::Int8 => self.codes.iter().map(|&c| c as u8).collect(),
            Bits::Int4 => self
                .codes
                .chunks(2)
                .map(|pair| {
                    let lo = (pair[0] as u8) & 0x0f;
                    let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
                    lo | (hi << 4)
                })
                .collect(),
        }
    }

    pub fn unpack(&mut self, bytes: &[u8]) -> Result<()> {
        let n = self.len();
        if bytes.len() != self.code_bytes() {
            return Err(MimoError::Corrupt(format!(
                "expected {} code bytes, got {}",
                self.code_bytes(),
                bytes.len()
            )));
        }
        self.codes = match self.bits() {
            Bits::Int8 => bytes.iter().map(|&b| b as i8).collect(),
            Bits::Int4 => {
                let sign = |nib: u8| ((nib << 4) as i8) >> 4;
                let mut out = Vec::with_capacity(n);
                for &b in bytes {
                    out.push(sign(b & 0x0f));
                    out.push(sign(b >> 4));
                }
                out.truncate(n);
                out
            }
        };
        Ok(())
    }
}

/// Quantizes a whole tensor with one range.
pub fn quantize_tensor(w: &Tensor, bits: Bits) -> QuantTensor {
    quantize_groups(w, bits, 1)
}

/// Quantizes with one range per slice along axis 0.
pub fn quantize_per_channel(w: &Tensor, bits: Bits) -> QuantTensor {
    quantize_groups(w, bits, w.dim(0))
}

fn quantize_groups(w: &Tensor, bits: Bits, groups: usize) -> QuantTensor {
    let glen = w.len() / groups;
    let mut params = Vec::with_capacity(groups);
    let mut codes = Vec::with_capacity(w.len());
    for chunk in w.data().chunks(glen) {
        let qp = QuantParams::for_values(chunk, bits);
        codes.extend(chunk.iter().map(|&v| qp.quantize(v)));
        params.push(qp);
    }
    QuantTensor {
        shape: w.shape().to_vec(),
        groups: params,
        codes,
    }
}

/// Quantizes with an externally fixed range per group.
fn quantize_with(w: &Tensor, groups: &[QuantParams]) -> QuantTensor {
    let glen = w.len() / groups.len();
    let codes = w
        .data()
        .chunks(glen)
        .zip(groups)
        .flat_map(|(chunk, qp)| chunk.iter().map(|&v| qp.quantize(v)).collect::<Vec<_>>())
        .collect();
    QuantTensor {
        shape: w.shape().to_vec(),
        groups: groups.to_vec(),
        codes,
    }
}

pub fn dequantize(q: &QuantTensor) -> Result<Tensor> {
    q.validate()?;
    let glen = q.group_len();
    let mut data = Vec::with_capacity(q.len());
    for (chunk, qp) in q.codes.chunks(glen).zip(&q.groups) {
        for &c in chunk {
            data.push(qp.dequantize(c)?);
        }
    }
    Tensor::from_vec(q.shape.clone(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConvParams {
    pub weight: QuantTensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl QuantConvParams {
    pub fn dequantized(&self) -> Result<ConvParams> {
        ConvParams::new(
            dequantize(&self.weight)?,
            self.bias.clone(),
            self.stride,
            self.padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.len() / self.out_channels()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantLinearParams {
    pub weight: QuantTensor,
    pub bias: Tensor,
}

impl QuantLinearParams {
    pub fn dequantized(&self) -> Result<LinearParams> {
        LinearParams::new(dequantize(&self.weight)?, self.bias.clone())
    }
}

fn quantize_weight(w: &Tensor, bits: Bits, granularity: Granularity) -> QuantTensor {
    match granularity {
        Granularity::PerTensor => quantize_tensor(w, bits),
        Granularity::PerChannel => quantize_per_channel(w, bits),
    }
}

fn quantize_conv(p: &ConvParams, bits: Bits, granularity: Granularity) -> QuantConvParams {
    QuantConvParams {
        weight: quantize_weight(&p.weight, bits, granularity),
        bias: p.bias.clone(),
        stride: p.stride,
        padding: p.padding,
    }
}

/// Replaces every conv and linear weight with integer codes. Biases stay
/// in `f32`; forward passes use dequantized weights.
///
/// Per-tensor ranges of conv layers with tied filters are computed over the
/// union of both layers so that tied filters receive identical codes.
pub fn quantize_model(
    graph: &ModelGraph,
    bits: Bits,
    granularity: Granularity,
) -> Result<ModelGraph> {
    let mut out = graph.clone();
    for node in &mut out.nodes {
        let replacement = match &mut node.kind {
            NodeKind::Conv(p) | NodeKind::BiasedConv(p) => {
                Some(NodeKind::QuantizedConv(quantize_conv(p, bits, granularity)))
            }
            NodeKind::Linear(p) => Some(NodeKind::QuantizedLinear(QuantLinearParams {
                weight: quantize_weight(&p.weight, bits, granularity),
                bias: p.bias.clone(),
            })),
            NodeKind::ResidualBlock(block) => {
                for unit in block.conv_units_mut() {
                    if let ConvLayer::Conv(p) | ConvLayer::Biased(p) = &unit.conv {
                        unit.conv = ConvLayer::Quantized(quantize_conv(p, bits, granularity));
                    }
                }
                None
            }
            _ => None,
        };
        if let Some(kind) = replacement {
            node.kind = kind;
        }
    }
    if granularity == Granularity::PerTensor {
        let mut pairs: Vec<(String, String)> = graph
            .ties
            .iter()
            .map(|t| (t.site_a.clone(), t.site_b.clone()))
            .collect();
        pairs.dedup();
        for (a, b) in pairs {
            let (Some(la), Some(lb)) = (graph.conv_layer(&a), graph.conv_layer(&b)) else {
                continue;
            };
            let (pa, pb) = (la.float_params()?, lb.float_params()?);
            let joint: Vec<f32> = pa
                .weight
                .data()
                .iter()
                .chain(pb.weight.data())
                .copied()
                .collect();
            let qp = [QuantParams::for_values(&joint, bits)];
            for (site, p) in [(&a, &pa), (&b, &pb)] {
                if let Some(mut h) = out.conv_layer_mut(site) {
                    if let ConvLayer::Quantized(q) = h.get() {
                        q.weight = quantize_with(&p.weight, &qp);
                    }
                }
            }
        }
    }
    Ok(out)
}
