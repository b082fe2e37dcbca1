//! The MIMO computation graph: named inputs feeding per-modality residual
//! branches, a concatenation fusion point, a shared fully connected trunk
//! and several classifier heads.

pub mod accounting;
pub mod exec;
pub mod io;
pub mod presets;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{MimoError, Result};
use crate::ops::{BnParams, ConvParams, LinearParams};
use crate::passes::quant::{QuantConvParams, QuantLinearParams, QuantTensor};
use crate::passes::vib::{GateParams, KeptChannels};
use crate::tensor::Tensor;

pub use accounting::{count_flops, count_params, node_flops, MemoryEstimate};
pub use exec::{forward, forward_tape};
pub use presets::{build_preset, Preset};

/// Weights of a convolution in any of its lifecycle forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "params", rename_all = "snake_case")]
pub enum ConvLayer {
    Conv(ConvParams),
    /// Produced by folding a batchnorm into the preceding conv.
    Biased(ConvParams),
    Quantized(QuantConvParams),
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        match self {
            ConvLayer::Conv(p) | ConvLayer::Biased(p) => p.out_channels(),
            ConvLayer::Quantized(q) => q.out_channels(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            ConvLayer::Conv(p) | ConvLayer::Biased(p) => p.fan_in(),
            ConvLayer::Quantized(q) => q.fan_in(),
        }
    }

    /// Float weights, dequantizing if needed.
    pub fn float_params(&self) -> Result<ConvParams> {
        match self {
            ConvLayer::Conv(p) | ConvLayer::Biased(p) => Ok(p.clone()),
            ConvLayer::Quantized(q) => q.dequantized(),
        }
    }

    pub fn float_params_mut(&mut self) -> Option<&mut ConvParams> {
        match self {
            ConvLayer::Conv(p) | ConvLayer::Biased(p) => Some(p),
            ConvLayer::Quantized(_) => None,
        }
    }
}

/// A conv optionally followed by inference-mode batchnorm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: Option<BnParams>,
}

/// Main (non-bypass) path of a residual block:
/// `conv1 → bn1 → gate1 → relu → conv2 → bn2 → gate2 → recover`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainPath {
    pub conv1: ConvBn,
    pub gate1: Option<GateParams>,
    pub conv2: ConvBn,
    pub gate2: Option<GateParams>,
    /// Zero-fills pruned output channels back to the block width.
    pub recover: Option<KeptChannels>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockParams {
    /// `None` once every main-path output channel has been pruned; the
    /// block then reduces to `relu(bypass(x))`.
    pub main: Option<MainPath>,
    /// Bypass projection; identity when absent. Never gated.
    pub downsample: Option<ConvBn>,
}

impl ResidualBlockParams {
    pub fn conv_units(&self) -> Vec<(&'static str, &ConvBn)> {
        let mut out = Vec::new();
        if let Some(m) = &self.main {
            out.push(("conv1", &m.conv1));
            out.push(("conv2", &m.conv2));
        }
        if let Some(d) = &self.downsample {
            out.push(("downsample", d));
        }
        out
    }

    pub fn conv_units_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out = Vec::new();
        if let Some(m) = &mut self.main {
            out.push(&mut m.conv1);
            out.push(&mut m.conv2);
        }
        if let Some(d) = &mut self.downsample {
            out.push(d);
        }
        out
    }

    fn unit_mut(&mut self, slot: &str) -> Option<&mut ConvBn> {
        match slot {
            "conv1" => self.main.as_mut().map(|m| &mut m.conv1),
            "conv2" => self.main.as_mut().map(|m| &mut m.conv2),
            "downsample" => self.downsample.as_mut(),
            _ => None,
        }
    }

    fn unit(&self, slot: &str) -> Option<&ConvBn> {
        match slot {
            "conv1" => self.main.as_ref().map(|m| &m.conv1),
            "conv2" => self.main.as_ref().map(|m| &m.conv2),
            "downsample" => self.downsample.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum NodeKind {
    Conv(ConvParams),
    Bn(BnParams),
    Relu,
    Linear(LinearParams),
    ResidualBlock(ResidualBlockParams),
    Concat,
    GlobalPool,
    Gate(GateParams),
    ChannelRecover(KeptChannels),
    BiasedConv(ConvParams),
    QuantizedConv(QuantConvParams),
    QuantizedLinear(QuantLinearParams),
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Conv(_) => "conv",
            NodeKind::Bn(_) => "bn",
            NodeKind::Relu => "relu",
            NodeKind::Linear(_) => "linear",
            NodeKind::ResidualBlock(_) => "residual_block",
            NodeKind::Concat => "concat",
            NodeKind::GlobalPool => "global_pool",
            NodeKind::Gate(_) => "gate",
            NodeKind::ChannelRecover(_) => "channel_recover",
            NodeKind::BiasedConv(_) => "biased_conv",
            NodeKind::QuantizedConv(_) => "quantized_conv",
            NodeKind::QuantizedLinear(_) => "quantized_linear",
        }
    }

    fn arity(&self) -> usize {
        match self {
            NodeKind::Concat => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> Self {
        LayerNode {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A named entry point with its per-sample shape (batch excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDecl {
    pub name: String,
    pub node: String,
}

/// Filter `filter_b` of conv site `site_b` shares storage with filter
/// `filter_a` of `site_a` (weights and bias).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tie {
    pub site_a: String,
    pub filter_a: usize,
    pub site_b: String,
    pub filter_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub inputs: Vec<InputDecl>,
    pub nodes: Vec<LayerNode>,
    pub outputs: Vec<OutputDecl>,
    #[serde(default)]
    pub ties: Vec<Tie>,
}

/// Role of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    LinearWeight,
    LinearBias,
    GateMu,
    GateLogSigma2,
}

impl ParamClass {
    /// Learnable parameters; running BN statistics are not.
    pub fn learnable(self) -> bool {
        !matches!(self, ParamClass::BnMean | ParamClass::BnVar)
    }
}

pub enum Storage<'a> {
    F32(&'a Tensor),
    Codes(&'a QuantTensor),
}

pub enum StorageMut<'a> {
    F32(&'a mut Tensor),
    Codes(&'a mut QuantTensor),
}

impl Storage<'_> {
    pub fn len(&self) -> usize {
        match self {
            Storage::F32(t) => t.len(),
            Storage::Codes(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Visitor<'v> = dyn FnMut(&str, ParamClass, Storage) + 'v;
type VisitorMut<'v> = dyn FnMut(&str, ParamClass, StorageMut) + 'v;

fn visit_conv_params(site: &str, p: &ConvParams, f: &mut Visitor) {
    f(
        &format!("{site}.weight"),
        ParamClass::ConvWeight,
        Storage::F32(&p.weight),
    );
    f(
        &format!("{site}.bias"),
        ParamClass::ConvBias,
        Storage::F32(&p.bias),
    );
}

fn visit_conv(site: &str, layer: &ConvLayer, f: &mut Visitor) {
    match layer {
        ConvLayer::Conv(p) | ConvLayer::Biased(p) => visit_conv_params(site, p, f),
        ConvLayer::Quantized(q) => {
            f(
                &format!("{site}.weight"),
                ParamClass::ConvWeight,
                Storage::Codes(&q.weight),
            );
            f(
                &format!("{site}.bias"),
                ParamClass::ConvBias,
                Storage::F32(&q.bias),
            );
        }
    }
}

fn visit_conv_mut(site: &str, layer: &mut ConvLayer, f: &mut VisitorMut) {
    match layer {
        ConvLayer::Conv(p) | ConvLayer::Biased(p) => {
            f(
                &format!("{site}.weight"),
                ParamClass::ConvWeight,
                StorageMut::F32(&mut p.weight),
            );
            f(
                &format!("{site}.bias"),
                ParamClass::ConvBias,
                StorageMut::F32(&mut p.bias),
            );
        }
        ConvLayer::Quantized(q) => {
            f(
                &format!("{site}.weight"),
                ParamClass::ConvWeight,
                StorageMut::Codes(&mut q.weight),
            );
            f(
                &format!("{site}.bias"),
                ParamClass::ConvBias,
                StorageMut::F32(&mut q.bias),
            );
        }
    }
}

fn visit_bn(site: &str, bn: &BnParams, f: &mut Visitor) {
    f(
        &format!("{site}.gamma"),
        ParamClass::BnGamma,
        Storage::F32(&bn.gamma),
    );
    f(
        &format!("{site}.beta"),
        ParamClass::BnBeta,
        Storage::F32(&bn.beta),
    );
    f(
        &format!("{site}.mean"),
        ParamClass::BnMean,
        Storage::F32(&bn.mean),
    );
    f(
        &format!("{site}.var"),
        ParamClass::BnVar,
        Storage::F32(&bn.var),
    );
}

fn visit_bn_mut(site: &str, bn: &mut BnParams, f: &mut VisitorMut) {
    f(
        &format!("{site}.gamma"),
        ParamClass::BnGamma,
        StorageMut::F32(&mut bn.gamma),
    );
    f(
        &format!("{site}.beta"),
        ParamClass::BnBeta,
        StorageMut::F32(&mut bn.beta),
    );
    f(
        &format!("{site}.mean"),
        ParamClass::BnMean,
        StorageMut::F32(&mut bn.mean),
    );
    f(
        &format!("{site}.var"),
        ParamClass::BnVar,
        StorageMut::F32(&mut bn.var),
    );
}

fn visit_gate(site: &str, g: &GateParams, f: &mut Visitor) {
    f(
        &format!("{site}.mu"),
        ParamClass::GateMu,
        Storage::F32(&g.mu),
    );
    f(
        &format!("{site}.log_sigma2"),
        ParamClass::GateLogSigma2,
        Storage::F32(&g.log_sigma2),
    );
}

fn visit_gate_mut(site: &str, g: &mut GateParams, f: &mut VisitorMut) {
    f(
        &format!("{site}.mu"),
        ParamClass::GateMu,
        StorageMut::F32(&mut g.mu),
    );
    f(
        &format!("{site}.log_sigma2"),
        ParamClass::GateLogSigma2,
        StorageMut::F32(&mut g.log_sigma2),
    );
}

/// Key prefix of the batchnorm attached to a block conv slot.
pub(crate) fn block_bn_site(id: &str, slot: &str) -> String {
    match slot {
        "conv1" => format!("{id}.bn1"),
        "conv2" => format!("{id}.bn2"),
        _ => format!("{id}.downsample_bn"),
    }
}

impl ModelGraph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn input(&self, name: &str) -> Option<&InputDecl> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Ids of nodes that read `id`.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn is_output(&self, id: &str) -> bool {
        self.outputs.iter().any(|o| o.node == id)
    }

    /// Checks id uniqueness, references, arity and acyclicity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for i in &self.inputs {
            if !seen.insert(i.name.as_str()) {
                return Err(MimoError::graph(&i.name, "duplicate input name"));
            }
            if i.shape.is_empty() || i.shape.contains(&0) {
                return Err(MimoError::graph(&i.name, "input shape must be positive"));
            }
        }
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(MimoError::graph(&n.id, "duplicate node id"));
            }
        }
        for n in &self.nodes {
            if n.inputs.len() != n.kind.arity() {
                return Err(MimoError::graph(
                    &n.id,
                    format!(
                        "{} expects {} inputs, got {}",
                        n.kind.name(),
                        n.kind.arity(),
                        n.inputs.len()
                    ),
                ));
            }
            if let Some(bad) = n.inputs.iter().find(|i| !seen.contains(i.as_str())) {
                return Err(MimoError::graph(&n.id, format!("unknown input `{bad}`")));
            }
        }
        for o in &self.outputs {
            if self.node(&o.node).is_none() {
                return Err(MimoError::graph(
                    &o.node,
                    format!("output `{}` names a missing node", o.name),
                ));
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Node indices in evaluation order. Ties between ready nodes are
    /// broken by declaration order, so the order is deterministic.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                if let Some(&j) = index.get(inp.as_str()) {
                    indegree[i] += 1;
                    users[j].push(i);
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len())
            .filter(|&i| indegree[i] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len())
                .find(|i| !order.contains(i))
                .unwrap_or(0);
            return Err(MimoError::graph(
                &self.nodes[stuck].id,
                "graph contains a cycle",
            ));
        }
        Ok(order)
    }

    /// Every stored tensor in canonical order (node order, then a fixed
    /// order within each node). This order defines the `.mimo` weight
    /// section.
    pub fn visit(&self, f: &mut Visitor) {
        for n in &self.nodes {
            let id = n.id.as_str();
            match &n.kind {
                NodeKind::Conv(p) | NodeKind::BiasedConv(p) => visit_conv_params(id, p, f),
                NodeKind::QuantizedConv(q) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::ConvWeight,
                        Storage::Codes(&q.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::ConvBias,
                        Storage::F32(&q.bias),
                    );
                }
                NodeKind::Bn(bn) => visit_bn(id, bn, f),
                NodeKind::Linear(p) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::LinearWeight,
                        Storage::F32(&p.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::LinearBias,
                        Storage::F32(&p.bias),
                    );
                }
                NodeKind::QuantizedLinear(q) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::LinearWeight,
                        Storage::Codes(&q.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::LinearBias,
                        Storage::F32(&q.bias),
                    );
                }
                NodeKind::Gate(g) => visit_gate(id, g, f),
                NodeKind::ResidualBlock(b) => {
                    if let Some(m) = &b.main {
                        visit_conv(&format!("{id}.conv1"), &m.conv1.conv, f);
                        if let Some(bn) = &m.conv1.bn {
                            visit_bn(&format!("{id}.bn1"), bn, f);
                        }
                        if let Some(g) = &m.gate1 {
                            visit_gate(&format!("{id}.gate1"), g, f);
                        }
                        visit_conv(&format!("{id}.conv2"), &m.conv2.conv, f);
                        if let Some(bn) = &m.conv2.bn {
                            visit_bn(&format!("{id}.bn2"), bn, f);
                        }
                        if let Some(g) = &m.gate2 {
                            visit_gate(&format!("{id}.gate2"), g, f);
                        }
                    }
                    if let Some(d) = &b.downsample {
                        visit_conv(&format!("{id}.downsample"), &d.conv, f);
                        if let Some(bn) = &d.bn {
                            visit_bn(&format!("{id}.downsample_bn"), bn, f);
                        }
                    }
                }
                NodeKind::Relu
                | NodeKind::Concat
                | NodeKind::GlobalPool
                | NodeKind::ChannelRecover(_) => {}
            }
        }
    }

    /// Mutable counterpart of [`ModelGraph::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut VisitorMut) {
        for n in &mut self.nodes {
            let id = n.id.as_str();
            match &mut n.kind {
                NodeKind::Conv(p) | NodeKind::BiasedConv(p) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::ConvWeight,
                        StorageMut::F32(&mut p.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::ConvBias,
                        StorageMut::F32(&mut p.bias),
                    );
                }
                NodeKind::QuantizedConv(q) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::ConvWeight,
                        StorageMut::Codes(&mut q.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::ConvBias,
                        StorageMut::F32(&mut q.bias),
                    );
                }
                NodeKind::Bn(bn) => visit_bn_mut(id, bn, f),
                NodeKind::Linear(p) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::LinearWeight,
                        StorageMut::F32(&mut p.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::LinearBias,
                        StorageMut::F32(&mut p.bias),
                    );
                }
                NodeKind::QuantizedLinear(q) => {
                    f(
                        &format!("{id}.weight"),
                        ParamClass::LinearWeight,
                        StorageMut::Codes(&mut q.weight),
                    );
                    f(
                        &format!("{id}.bias"),
                        ParamClass::LinearBias,
                        StorageMut::F32(&mut q.bias),
                    );
                }
                NodeKind::Gate(g) => visit_gate_mut(id, g, f),
                NodeKind::ResidualBlock(b) => {
                    if let Some(m) = &mut b.main {
                        visit_conv_mut(&format!("{id}.conv1"), &mut m.conv1.conv, f);
                        if let Some(bn) = &mut m.conv1.bn {
                            visit_bn_mut(&format!("{id}.bn1"), bn, f);
                        }
                        if let Some(g) = &mut m.gate1 {
                            visit_gate_mut(&format!("{id}.gate1"), g, f);
                        }
                        visit_conv_mut(&format!("{id}.conv2"), &mut m.conv2.conv, f);
                        if let Some(bn) = &mut m.conv2.bn {
                            visit_bn_mut(&format!("{id}.bn2"), bn, f);
                        }
                        if let Some(g) = &mut m.gate2 {
                            visit_gate_mut(&format!("{id}.gate2"), g, f);
                        }
                    }
                    if let Some(d) = &mut b.downsample {
                        visit_conv_mut(&format!("{id}.downsample"), &mut d.conv, f);
                        if let Some(bn) = &mut d.bn {
                            visit_bn_mut(&format!("{id}.downsample_bn"), bn, f);
                        }
                    }
                }
                NodeKind::Relu
                | NodeKind::Concat
                | NodeKind::GlobalPool
                | NodeKind::ChannelRecover(_) => {}
            }
        }
    }

    /// Float tensors keyed by parameter id (codes excluded).
    pub fn float_params(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |key, _, s| {
            if let Storage::F32(t) = s {
                out.insert(key.to_string(), t.clone());
            }
        });
        out
    }

    /// Conv sites in node order: top-level conv node ids, and
    /// `{block}.conv1`, `{block}.conv2`, `{block}.downsample` inside blocks.
    pub fn conv_sites(&self) -> Vec<String> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.kind {
                NodeKind::Conv(_) | NodeKind::BiasedConv(_) | NodeKind::QuantizedConv(_) => {
                    out.push(n.id.clone())
                }
                NodeKind::ResidualBlock(b) => {
                    for (slot, _) in b.conv_units() {
                        out.push(format!("{}.{slot}", n.id));
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn split_site(site: &str) -> (&str, Option<&str>) {
        match site.rsplit_once('.') {
            Some((id, slot)) if matches!(slot, "conv1" | "conv2" | "downsample") => {
                (id, Some(slot))
            }
            _ => (site, None),
        }
    }

    pub fn conv_layer(&self, site: &str) -> Option<ConvLayer> {
        let (id, slot) = Self::split_site(site);
        let node = self.node(id)?;
        match (&node.kind, slot) {
            (NodeKind::Conv(p), None) => Some(ConvLayer::Conv(p.clone())),
            (NodeKind::BiasedConv(p), None) => Some(ConvLayer::Biased(p.clone())),
            (NodeKind::QuantizedConv(q), None) => Some(ConvLayer::Quantized(q.clone())),
            (NodeKind::ResidualBlock(b), Some(slot)) => b.unit(slot).map(|u| u.conv.clone()),
            _ => None,
        }
    }

    /// Mutable access to a conv site. Top-level nodes are exposed through
    /// a temporary [`ConvLayer`] view written back on drop, so callers see
    /// one uniform type.
    pub fn conv_layer_mut(&mut self, site: &str) -> Option<ConvLayerMut<'_>> {
        let (id, slot) = Self::split_site(site);
        let node = self.nodes.iter_mut().find(|n| n.id == id)?;
        match slot {
            None => {
                let layer = match &node.kind {
                    NodeKind::Conv(p) => ConvLayer::Conv(p.clone()),
                    NodeKind::BiasedConv(p) => ConvLayer::Biased(p.clone()),
                    NodeKind::QuantizedConv(q) => ConvLayer::Quantized(q.clone()),
                    _ => return None,
                };
                Some(ConvLayerMut::Top { node, layer })
            }
            Some(slot) => match &mut node.kind {
                NodeKind::ResidualBlock(b) => {
                    b.unit_mut(slot).map(|u| ConvLayerMut::Block(&mut u.conv))
                }
                _ => None,
            },
        }
    }

    /// The batchnorm applied directly to a conv site's output: the block's
    /// own bn, or a top-level bn node that is the conv's only consumer.
    pub fn site_bn(&self, site: &str) -> Option<BnParams> {
        let (id, slot) = Self::split_site(site);
        match slot {
            Some(slot) => match &self.node(id)?.kind {
                NodeKind::ResidualBlock(b) => b.unit(slot)?.bn.clone(),
                _ => None,
            },
            None => {
                let consumers = self.consumers(id);
                if consumers.len() != 1 || self.is_output(id) {
                    return None;
                }
                match &self.node(consumers[0])?.kind {
                    NodeKind::Bn(bn) => Some(bn.clone()),
                    _ => None,
                }
            }
        }
    }

    pub fn site_bn_mut(&mut self, site: &str) -> Option<&mut BnParams> {
        let (id, slot) = Self::split_site(site);
        match slot {
            Some(slot) => match &mut self.node_mut(id)?.kind {
                NodeKind::ResidualBlock(b) => b.unit_mut(slot)?.bn.as_mut(),
                _ => None,
            },
            None => {
                let consumers = self.consumers(id);
                if consumers.len() != 1 || self.is_output(id) {
                    return None;
                }
                let cid = consumers[0].to_string();
                match &mut self.node_mut(&cid)?.kind {
                    NodeKind::Bn(bn) => Some(bn),
                    _ => None,
                }
            }
        }
    }

    /// Copies each tied `b` filter (and its batchnorm channel) from the `a`
    /// side so tied storage is bitwise identical.
    pub fn sync_ties(&mut self) -> Result<()> {
        for tie in self.ties.clone() {
            let src = self
                .conv_layer(&tie.site_a)
                .ok_or_else(|| MimoError::graph(&tie.site_a, "tie names a missing conv site"))?;
            let src = match src {
                ConvLayer::Conv(p) | ConvLayer::Biased(p) => p,
                ConvLayer::Quantized(_) => continue,
            };
            let mut dst = self
                .conv_layer_mut(&tie.site_b)
                .ok_or_else(|| MimoError::graph(&tie.site_b, "tie names a missing conv site"))?;
            let Some(p) = dst.float_mut() else { continue };
            let k = src.fan_in();
            if p.fan_in() != k {
                return Err(MimoError::graph(
                    &tie.site_b,
                    "tied filters differ in fan-in",
                ));
            }
            p.weight.data_mut()[tie.filter_b * k..(tie.filter_b + 1) * k]
                .copy_from_slice(&src.weight.data()[tie.filter_a * k..(tie.filter_a + 1) * k]);
            p.bias.data_mut()[tie.filter_b] = src.bias.data()[tie.filter_a];
            drop(dst);
            if let Some(bn_a) = self.site_bn(&tie.site_a) {
                if let Some(bn_b) = self.site_bn_mut(&tie.site_b) {
                    let (i, j) = (tie.filter_a, tie.filter_b);
                    bn_b.gamma.data_mut()[j] = bn_a.gamma.data()[i];
                    bn_b.beta.data_mut()[j] = bn_a.beta.data()[i];
                    bn_b.mean.data_mut()[j] = bn_a.mean.data()[i];
                    bn_b.var.data_mut()[j] = bn_a.var.data()[i];
                }
            }
        }
        Ok(())
    }

    /// Parameter prefix of the batchnorm returned by [`ModelGraph::site_bn`].
    pub fn site_bn_key(&self, site: &str) -> Option<String> {
        let (id, slot) = Self::split_site(site);
        self.site_bn(site)?;
        Some(match slot {
            Some(slot) => block_bn_site(id, slot),
            None => self.consumers(id)[0].to_string(),
        })
    }
}

/// Uniform mutable handle returned by [`ModelGraph::conv_layer_mut`].
pub enum ConvLayerMut<'a> {
    Top {
        node: &'a mut LayerNode,
        layer: ConvLayer,
    },
    Block(&'a mut ConvLayer),
}

impl ConvLayerMut<'_> {
    pub fn get(&mut self) -> &mut ConvLayer {
        match self {
            ConvLayerMut::Top { layer, .. } => layer,
            ConvLayerMut::Block(l) => l,
        }
    }

    pub fn float_mut(&mut self) -> Option<&mut ConvParams> {
        self.get().float_params_mut()
    }
}

impl std::ops::Deref for ConvLayerMut<'_> {
    type Target = ConvLayer;

    fn deref(&self) -> &ConvLayer {
        match self {
            ConvLayerMut::Top { layer, .. } => layer,
            ConvLayerMut::Block(l) => l,
        }
    }
}

impl std::ops::DerefMut for ConvLayerMut<'_> {
    fn deref_mut(&mut self) -> &mut ConvLayer {
        self.get()
    }
}

impl Drop for ConvLayerMut<'_> {
    fn drop(&mut self) {
        if let ConvLayerMut::Top { node, layer } = self {
            node.kind = match layer.clone() {
                ConvLayer::Conv(p) => NodeKind::Conv(p),
                ConvLayer::Biased(p) => NodeKind::BiasedConv(p),
                ConvLayer::Quantized(q) => NodeKind::QuantizedConv(q),
            };
        }
    }
}
