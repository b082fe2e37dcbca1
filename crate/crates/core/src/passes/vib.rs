//! Channel pruning with learnable information-bottleneck gates.
//!
//! Each gated channel carries a multiplicative Gaussian gate
//! `z_i = μ_i + ε_i·σ_i`. Training adds `γ·Σ log(1 + μ_i²/σ_i²)` to the task
//! loss, which pushes uninformative gates toward zero signal-to-noise ratio
//! `α_i = μ_i²/σ_i²`. Channels with `α_i ≤ τ` are then removed.
//!
//! Inside residual blocks gates sit only on the main path (after `bn1` and
//! `bn2`). The block keeps its external width: after the second gate a
//! channel-recover step zero-fills the pruned channels so the skip-add
//! still sees the full channel count. Bypass paths are never gated, and no
//! gate is placed on the tensor flowing between two blocks.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MimoError, Result};
use crate::graph::{ConvBn, ConvLayer, LayerNode, MainPath, ModelGraph, NodeKind};
use crate::harness::data::SyntheticDataset;
use crate::harness::train::{self, TrainOptions, TrainReport};
use crate::ops::{BnParams, ConvParams, LinearParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Sample `ε ~ N(0,1)` per sample and channel from the given seed.
    Train { seed: u64 },
    /// Deterministic `y = μ·x`.
    Eval,
}

/// `count` standard normal draws, one per (sample, channel) pair in
/// sample-major order.
pub fn gate_noise(seed: u64, count: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Noise seed of the gate at `site` on a training tape seeded with `seed`,
/// so every gate draws its own stream.
pub fn site_noise_seed(seed: u64, site: &str) -> u64 {
    seed ^ crate::autodiff::fnv1a(site)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mu: Tensor,
    /// Log variance, so that `σ² = exp(log_sigma2)` stays positive.
    pub log_sigma2: Tensor,
}

impl GateParams {
    pub fn new(channels: usize, cfg: &VibConfig) -> Self {
        GateParams {
            mu: Tensor::full(&[channels], cfg.mu_init),
            log_sigma2: Tensor::full(&[channels], cfg.log_sigma2_init),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Per-channel `α_i = μ_i²/σ_i²`.
    pub fn alpha(&self) -> Vec<f64> {
        self.mu
            .data()
            .iter()
            .zip(self.log_sigma2.data())
            .map(|(&m, &ls)| (m as f64).powi(2) * (-(ls as f64)).exp())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibConfig {
    /// Regularizer weight `γ`.
    pub gamma_reg: f32,
    /// Prune threshold on `α`.
    pub tau: f64,
    pub mu_init: f32,
    pub log_sigma2_init: f32,
}

impl VibConfig {
    /// Defaults for a graph carrying `gate_layers` gates: `γ = 1e-3/#gates`,
    /// `τ = 1e-2`, `μ₀ = 1`, `log σ²₀ = −2.3`.
    pub fn with_gate_count(gate_layers: usize) -> Self {
        VibConfig {
            gamma_reg: 1e-3 / gate_layers.max(1) as f32,
            tau: 1e-2,
            mu_init: 1.0,
            log_sigma2_init: -2.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_reg > 0.0) || !(self.tau > 0.0) || !self.log_sigma2_init.is_finite() {
            return Err(MimoError::Config(
                "vib config needs gamma_reg > 0, tau > 0 and finite log_sigma2_init".into(),
            ));
        }
        Ok(())
    }
}

/// Surviving channel indices of a layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptChannels {
    pub original_count: usize,
    pub kept: Vec<usize>,
}

impl KeptChannels {
    pub fn all(count: usize) -> Self {
        KeptChannels {
            original_count: count,
            kept: (0..count).collect(),
        }
    }

    pub fn new(original_count: usize, mut kept: Vec<usize>) -> Result<Self> {
        kept.sort_unstable();
        let dup = kept.windows(2).any(|w| w[0] == w[1]);
        if dup || kept.last().is_some_and(|&k| k >= original_count) {
            return Err(MimoError::Usage(format!(
                "kept channels {kept:?} invalid for {original_count} channels"
            )));
        }
        Ok(KeptChannels {
            original_count,
            kept,
        })
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.original_count
    }

    pub fn pruned_fraction(&self) -> f64 {
        1.0 - self.kept.len() as f64 / self.original_count as f64
    }
}

/// Applies a gate. Train mode draws `N·C` standard normals from `seed`.
pub fn gate_forward(x: &Tensor, g: &GateParams, mode: GateMode) -> Result<Tensor> {
    let c = g.channels();
    if x.rank() < 2 || x.dim(1) != c || g.log_sigma2.len() != c {
        return Err(MimoError::Shape {
            op: "gate",
            left: x.shape().to_vec(),
            right: g.mu.shape().to_vec(),
        });
    }
    let n = x.dim(0);
    let inner: usize = x.shape()[2..].iter().product();
    let factors: Vec<f32> = match mode {
        GateMode::Eval => (0..n).flat_map(|_| g.mu.data().iter().copied()).collect(),
        GateMode::Train { seed } => gate_noise(seed, n * c)
            .into_iter()
            .enumerate()
            .map(|(i, eps)| {
                let ch = i % c;
                g.mu.data()[ch] + eps * (0.5 * g.log_sigma2.data()[ch]).exp()
            })
            .collect(),
    };
    let mut y = x.clone();
    for (chunk, &f) in y.data_mut().chunks_mut(inner).zip(&factors) {
        for v in chunk {
            *v *= f;
        }
    }
    Ok(y)
}

/// `Σ_i log(1 + μ_i²/σ_i²)` for one gate.
pub(crate) fn regularizer_term(mu: &Tensor, log_sigma2: &Tensor) -> f64 {
    mu.data()
        .iter()
        .zip(log_sigma2.data())
        .map(|(&m, &ls)| ((m as f64).powi(2) * (-(ls as f64)).exp()).ln_1p())
        .sum()
}

/// Gradients of [`regularizer_term`] w.r.t. `μ` and `log σ²`.
pub(crate) fn regularizer_grad(mu: &Tensor, log_sigma2: &Tensor) -> (Vec<f64>, Vec<f64>) {
    mu.data()
        .iter()
        .zip(log_sigma2.data())
        .map(|(&m, &ls)| {
            let inv_s2 = (-(ls as f64)).exp();
            let alpha = (m as f64).powi(2) * inv_s2;
            (
                2.0 * m as f64 * inv_s2 / (1.0 + alpha),
                -alpha / (1.0 + alpha),
            )
        })
        .unzip()
}

/// Where a gate lives in the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSite {
    /// Parameter prefix: a gate node id, or `{block}.gate1` / `{block}.gate2`.
    pub site: String,
    pub gate: GateParams,
}

/// Every gate in node order.
pub fn gate_sites(graph: &ModelGraph) -> Vec<GateSite> {
    let mut out = Vec::new();
    for n in &graph.nodes {
        match &n.kind {
            NodeKind::Gate(g) => out.push(GateSite {
                site: n.id.clone(),
                gate: g.clone(),
            }),
            NodeKind::ResidualBlock(b) => {
                if let Some(m) = &b.main {
                    for (slot, g) in [("gate1", &m.gate1), ("gate2", &m.gate2)] {
                        if let Some(g) = g {
                            out.push(GateSite {
                                site: format!("{}.{slot}", n.id),
                                gate: g.clone(),
                            });
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// `R = Σ_layers Σ_i log(1 + μ_i²/σ_i²)` over every gate in the graph.
pub fn vib_regularizer(graph: &ModelGraph) -> f64 {
    gate_sites(graph)
        .iter()
        .map(|s| regularizer_term(&s.gate.mu, &s.gate.log_sigma2))
        .sum()
}

/// Keeps channel `i` iff `α_i > τ`. May return an empty set; whether that
/// is legal depends on the consumer (see [`compute_masks`]).
pub fn compute_mask(g: &GateParams, cfg: &VibConfig) -> KeptChannels {
    let kept = g
        .alpha()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > cfg.tau)
        .map(|(i, _)| i)
        .collect();
    KeptChannels {
        original_count: g.channels(),
        kept,
    }
}

/// Hard masks keyed by gate site.
pub type MaskSet = BTreeMap<String, KeptChannels>;

/// Computes a mask for every gate and rejects layers that would lose all
/// channels without a recover step behind them. A block whose second gate
/// closes entirely degenerates to its bypass, so its first gate may then be
/// empty as well.
pub fn compute_masks(graph: &ModelGraph, cfg: &VibConfig) -> Result<MaskSet> {
    let masks: MaskSet = gate_sites(graph)
        .into_iter()
        .map(|s| {
            let m = compute_mask(&s.gate, cfg);
            (s.site, m)
        })
        .collect();
    check_masks(graph, &masks)?;
    Ok(masks)
}

fn empty_allowed(graph: &ModelGraph, masks: &MaskSet, site: &str) -> bool {
    match site.rsplit_once('.') {
        Some((block, "gate2")) if graph.node(block).is_some() => true,
        Some((block, "gate1")) if graph.node(block).is_some() => masks
            .get(&format!("{block}.gate2"))
            .is_some_and(|m| m.kept.is_empty()),
        _ => {
            let consumers = graph.consumers(site);
            !consumers.is_empty()
                && consumers.iter().all(|c| {
                    matches!(
                        graph.node(c).map(|n| &n.kind),
                        Some(NodeKind::ChannelRecover(_))
                    )
                })
        }
    }
}

fn check_masks(graph: &ModelGraph, masks: &MaskSet) -> Result<()> {
    for (site, mask) in masks {
        if mask.kept.is_empty() && !empty_allowed(graph, masks, site) {
            return Err(MimoError::graph(
                site,
                "every channel was pruned and no channel-recover follows; lower tau",
            ));
        }
    }
    Ok(())
}

/// Inserts unit gates at every legal site: both main-path positions of
/// each residual block, and after every non-head linear layer or conv+bn
/// pair whose output does not flow into a residual block.
pub fn insert_gates(graph: &ModelGraph, cfg: &VibConfig) -> Result<ModelGraph> {
    graph.validate()?;
    let mut out = graph.clone();
    for node in &mut out.nodes {
        if let NodeKind::ResidualBlock(b) = &mut node.kind {
            if let Some(m) = &mut b.main {
                m.gate1 = Some(GateParams::new(m.conv1.conv.out_channels(), cfg));
                m.gate2 = Some(GateParams::new(m.conv2.conv.out_channels(), cfg));
            }
        }
    }
    let mut sites = Vec::new();
    for n in &graph.nodes {
        let width = match &n.kind {
            NodeKind::Linear(p) if !graph.is_output(&n.id) => Some(p.out_features()),
            NodeKind::Bn(bn) => {
                let from_conv = graph
                    .node(&n.inputs[0])
                    .is_some_and(|p| matches!(p.kind, NodeKind::Conv(_) | NodeKind::BiasedConv(_)));
                (from_conv && !graph.is_output(&n.id) && !feeds_block(graph, &n.id))
                    .then(|| bn.channels())
            }
            _ => None,
        };
        if let Some(w) = width {
            sites.push((n.id.clone(), w));
        }
    }
    for (producer, width) in sites {
        let gate_id = format!("{producer}_gate");
        if out.node(&gate_id).is_some() {
            return Err(MimoError::graph(&gate_id, "gate id already in use"));
        }
        for n in &mut out.nodes {
            for i in &mut n.inputs {
                if *i == producer {
                    *i = gate_id.clone();
                }
            }
        }
        let pos = out
            .nodes
            .iter()
            .position(|n| n.id == producer)
            .expect("producer exists");
        out.nodes.insert(
            pos + 1,
            LayerNode::new(
                gate_id,
                NodeKind::Gate(GateParams::new(width, cfg)),
                &[&producer],
            ),
        );
    }
    out.validate()?;
    Ok(out)
}

/// True if `id`'s output reaches a residual block through element-wise nodes.
fn feeds_block(graph: &ModelGraph, id: &str) -> bool {
    graph
        .consumers(id)
        .iter()
        .any(|c| match graph.node(c).map(|n| &n.kind) {
            Some(NodeKind::ResidualBlock(_)) => true,
            Some(NodeKind::Relu) | Some(NodeKind::Gate(_)) => feeds_block(graph, c),
            _ => false,
        })
}

/// Drops every gate outright, without folding `μ` anywhere.
pub fn strip_gates(graph: &ModelGraph) -> ModelGraph {
    let mut out = graph.clone();
    for n in &mut out.nodes {
        if let NodeKind::ResidualBlock(b) = &mut n.kind {
            if let Some(m) = &mut b.main {
                m.gate1 = None;
                m.gate2 = None;
            }
        }
    }
    let gates: Vec<(String, String)> = out
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Gate(_)))
        .map(|n| (n.id.clone(), n.inputs[0].clone()))
        .collect();
    for (gate, src) in &gates {
        rewire(&mut out, gate, src);
    }
    out.nodes.retain(|n| !matches!(n.kind, NodeKind::Gate(_)));
    out
}

fn rewire(graph: &mut ModelGraph, from: &str, to: &str) {
    for n in &mut graph.nodes {
        for i in &mut n.inputs {
            if i == from {
                *i = to.to_string();
            }
        }
    }
    for o in &mut graph.outputs {
        if o.node == from {
            o.node = to.to_string();
        }
    }
}

/// Zeroes `μ` on every pruned channel: the eval-mode gated model then
/// computes exactly what the structurally pruned model computes.
pub fn apply_masks(graph: &ModelGraph, masks: &MaskSet) -> Result<ModelGraph> {
    let mut out = graph.clone();
    let mut missing = None;
    out.visit_mut(&mut |key, _, storage| {
        let Some(site) = key.strip_suffix(".mu") else {
            return;
        };
        let crate::graph::StorageMut::F32(mu) = storage else {
            return;
        };
        match masks.get(site) {
            Some(mask) => {
                for (i, v) in mu.data_mut().iter_mut().enumerate() {
                    if mask.kept.binary_search(&i).is_err() {
                        *v = 0.0;
                    }
                }
            }
            None => missing = Some(site.to_string()),
        }
    });
    match missing {
        Some(site) => Err(MimoError::graph(site, "no mask supplied for gate")),
        None => Ok(out),
    }
}

/// Random masks with the same per-layer kept counts as `like`.
pub fn random_masks_like(like: &MaskSet, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    like.iter()
        .map(|(site, m)| {
            let mut idx: Vec<usize> = (0..m.original_count).collect();
            idx.shuffle(&mut rng);
            let mut kept = idx[..m.kept.len()].to_vec();
            kept.sort_unstable();
            (
                site.clone(),
                KeptChannels {
                    original_count: m.original_count,
                    kept,
                },
            )
        })
        .collect()
}

/// Selects channels `kept` along axis 1.
pub fn select_channels(x: &Tensor, kept: &[usize]) -> Result<Tensor> {
    x.select_axis1(kept)
}

/// Zero-fills `x` (`[N,K,…]`) back to `mask.original_count` channels,
/// placing input channel `j` at `mask.kept[j]`.
pub fn channel_recover(x: &Tensor, mask: &KeptChannels) -> Result<Tensor> {
    if x.rank() < 2 || x.dim(1) != mask.kept.len() {
        return Err(MimoError::Shape {
            op: "channel_recover",
            left: x.shape().to_vec(),
            right: vec![mask.kept.len()],
        });
    }
    let n = x.dim(0);
    let k = mask.kept.len();
    let c = mask.original_count;
    let inner: usize = x.shape()[2..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[1] = c;
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for i in 0..n {
        for (j, &ch) in mask.kept.iter().enumerate() {
            let src = &x.data()[(i * k + j) * inner..(i * k + j + 1) * inner];
            dst[(i * c + ch) * inner..(i * c + ch + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(out)
}

fn float_conv<'a>(layer: &'a mut ConvLayer, at: &str) -> Result<&'a mut ConvParams> {
    layer
        .float_params_mut()
        .ok_or_else(|| MimoError::graph(at, "cannot prune a quantized conv"))
}

fn restrict_conv_out(p: &mut ConvParams, kept: &[usize]) -> Result<()> {
    p.weight = p.weight.select_axis0(kept)?;
    p.bias = p.bias.select_axis0(kept)?;
    Ok(())
}

fn scale_bn(bn: &mut BnParams, mu: &[f32]) {
    for ((g, b), &m) in bn
        .gamma
        .data_mut()
        .iter_mut()
        .zip(bn.beta.data_mut())
        .zip(mu)
    {
        *g *= m;
        *b *= m;
    }
}

fn scale_rows(weight: &mut Tensor, bias: &mut Tensor, mu: &[f32]) {
    let row = weight.len() / weight.dim(0);
    for (i, &m) in mu.iter().enumerate() {
        for v in &mut weight.data_mut()[i * row..(i + 1) * row] {
            *v *= m;
        }
        bias.data_mut()[i] *= m;
    }
}

fn kept_mu(g: &GateParams, kept: &[usize]) -> Vec<f32> {
    kept.iter().map(|&i| g.mu.data()[i]).collect()
}

/// Restricts a conv(+bn) unit to `kept` output channels and folds the gate
/// means into it (into `γ`/`β` when a bn follows, else into the filters).
fn prune_unit_out(unit: &mut ConvBn, gate: &GateParams, kept: &[usize], at: &str) -> Result<()> {
    let mu = kept_mu(gate, kept);
    let p = float_conv(&mut unit.conv, at)?;
    restrict_conv_out(p, kept)?;
    match &mut unit.bn {
        Some(bn) => {
            *bn = bn.select(kept)?;
            scale_bn(bn, &mu);
        }
        None => scale_rows(&mut p.weight, &mut p.bias, &mu),
    }
    Ok(())
}

fn mask_for<'a>(masks: &'a MaskSet, site: &str) -> Result<&'a KeptChannels> {
    masks
        .get(site)
        .ok_or_else(|| MimoError::graph(site, "no mask supplied for gate"))
}

fn prune_block_main(id: &str, m: &MainPath, masks: &MaskSet) -> Result<Option<MainPath>> {
    let width1 = m.conv1.conv.out_channels();
    let width2 = m.conv2.conv.out_channels();
    let k1 = match &m.gate1 {
        Some(_) => mask_for(masks, &format!("{id}.gate1"))?.clone(),
        None => KeptChannels::all(width1),
    };
    let k2 = match &m.gate2 {
        Some(_) => mask_for(masks, &format!("{id}.gate2"))?.clone(),
        None => KeptChannels::all(width2),
    };
    if k1.original_count != width1 || k2.original_count != width2 {
        return Err(MimoError::graph(
            id,
            "mask width does not match block channels",
        ));
    }
    if k2.kept.is_empty() {
        return Ok(None);
    }
    if k1.kept.is_empty() {
        return Err(MimoError::graph(
            id,
            "first gate pruned every channel while the second gate keeps some; lower tau",
        ));
    }
    let mut m = m.clone();
    if let Some(g) = m.gate1.take() {
        prune_unit_out(&mut m.conv1, &g, &k1.kept, id)?;
        let p2 = float_conv(&mut m.conv2.conv, id)?;
        p2.weight = p2.weight.select_axis1(&k1.kept)?;
    }
    if let Some(g) = m.gate2.take() {
        prune_unit_out(&mut m.conv2, &g, &k2.kept, id)?;
        if !k2.is_full() {
            m.recover = Some(match m.recover.take() {
                None => k2,
                Some(prev) => KeptChannels {
                    original_count: prev.original_count,
                    kept: k2.kept.iter().map(|&j| prev.kept[j]).collect(),
                },
            });
        }
    }
    Ok(Some(m))
}

/// Removes gated channels for good. Gate means are folded into the kept
/// channels, downstream layers lose the matching input channels, and a
/// channel-recover step restores block width after each second gate.
/// Forward outputs match the eval-mode gated graph under [`apply_masks`].
pub fn prune_structural(graph: &ModelGraph, masks: &MaskSet) -> Result<ModelGraph> {
    graph.validate()?;
    if !graph.ties.is_empty() {
        return Err(MimoError::Usage("prune before merging branches".into()));
    }
    check_masks(graph, masks)?;
    let mut out = graph.clone();
    for node in &mut out.nodes {
        if let NodeKind::ResidualBlock(b) = &mut node.kind {
            if let Some(m) = &b.main {
                b.main = prune_block_main(&node.id, m, masks)?;
            }
        }
    }
    let gate_ids: Vec<String> = out
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Gate(_)))
        .map(|n| n.id.clone())
        .collect();
    for gid in gate_ids {
        prune_gate_node(&mut out, &gid, mask_for(masks, &gid)?)?;
    }
    out.validate()?;
    Ok(out)
}

fn prune_gate_node(graph: &mut ModelGraph, gid: &str, mask: &KeptChannels) -> Result<()> {
    let node = graph.node(gid).expect("gate id from graph").clone();
    let NodeKind::Gate(gate) = &node.kind else {
        unreachable!()
    };
    if graph.is_output(gid) {
        return Err(MimoError::graph(gid, "a gate cannot be a graph output"));
    }
    if mask.original_count != gate.channels() {
        return Err(MimoError::graph(gid, "mask width does not match gate"));
    }
    let producer = node.inputs[0].clone();
    if graph.consumers(&producer).len() != 1 {
        return Err(MimoError::graph(gid, "gated layer feeds other consumers"));
    }
    let kept = &mask.kept;
    let mu = kept_mu(gate, kept);
    let prod_kind = graph.node(&producer).map(|n| n.kind.clone());
    match prod_kind {
        Some(NodeKind::Linear(p)) => {
            let mut p =
                LinearParams::new(p.weight.select_axis0(kept)?, p.bias.select_axis0(kept)?)?;
            scale_rows(&mut p.weight, &mut p.bias, &mu);
            graph.node_mut(&producer).unwrap().kind = NodeKind::Linear(p);
        }
        Some(NodeKind::Conv(mut p)) | Some(NodeKind::BiasedConv(mut p)) => {
            restrict_conv_out(&mut p, kept)?;
            scale_rows(&mut p.weight, &mut p.bias, &mu);
            let n = graph.node_mut(&producer).unwrap();
            n.kind = match n.kind {
                NodeKind::Conv(_) => NodeKind::Conv(p),
                _ => NodeKind::BiasedConv(p),
            };
        }
        Some(NodeKind::Bn(bn)) => {
            let conv_id = graph.node(&producer).unwrap().inputs[0].clone();
            if graph.consumers(&conv_id).len() != 1 {
                return Err(MimoError::graph(
                    &conv_id,
                    "conv before a gated bn feeds other consumers",
                ));
            }
            let mut bn = bn.select(kept)?;
            scale_bn(&mut bn, &mu);
            graph.node_mut(&producer).unwrap().kind = NodeKind::Bn(bn);
            let conv = graph
                .node_mut(&conv_id)
                .ok_or_else(|| MimoError::graph(gid, "bn has no producer"))?;
            match &mut conv.kind {
                NodeKind::Conv(p) | NodeKind::BiasedConv(p) => restrict_conv_out(p, kept)?,
                _ => return Err(MimoError::graph(&conv_id, "gated bn must follow a conv")),
            }
        }
        _ => {
            return Err(MimoError::graph(
                gid,
                "gate must follow a linear, conv or conv+bn layer",
            ))
        }
    }
    rewire(graph, gid, &producer);
    graph.nodes.retain(|n| n.id != gid);
    for c in graph
        .consumers(&producer)
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
    {
        slice_inputs(graph, &c, mask)?;
    }
    Ok(())
}

/// Drops input channels of the layer(s) consuming a pruned tensor, looking
/// through element-wise nodes.
fn slice_inputs(graph: &mut ModelGraph, id: &str, mask: &KeptChannels) -> Result<()> {
    let kind = graph.node(id).map(|n| n.kind.clone());
    match kind {
        Some(NodeKind::Relu) => {
            for c in graph
                .consumers(id)
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
            {
                slice_inputs(graph, &c, mask)?;
            }
            if graph.is_output(id) {
                return Err(MimoError::graph(id, "pruned channels reach a graph output"));
            }
        }
        Some(NodeKind::Linear(p)) => {
            graph.node_mut(id).unwrap().kind = NodeKind::Linear(LinearParams::new(
                p.weight.select_axis1(&mask.kept)?,
                p.bias,
            )?);
        }
        Some(NodeKind::Conv(_)) | Some(NodeKind::BiasedConv(_)) => {
            if let NodeKind::Conv(p) | NodeKind::BiasedConv(p) =
                &mut graph.node_mut(id).unwrap().kind
            {
                p.weight = p.weight.select_axis1(&mask.kept)?;
            }
        }
        Some(NodeKind::ChannelRecover(_)) => {
            return Err(MimoError::graph(
                id,
                "recover after a top-level gate is not supported",
            ));
        }
        Some(other) => {
            return Err(MimoError::graph(
                id,
                format!(
                    "cannot slice inputs of a {} consumer of a pruned layer",
                    other.name()
                ),
            ));
        }
        None => return Err(MimoError::graph(id, "missing consumer")),
    }
    Ok(())
}

/// Per-layer pruning statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneStat {
    pub site: String,
    pub original: usize,
    pub kept: usize,
    pub percent_pruned: f64,
}

/// Layers sorted by percentage pruned, highest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub layers: Vec<LayerPruneStat>,
}

impl MaskReport {
    pub fn from_masks(masks: &MaskSet) -> Self {
        let mut layers: Vec<LayerPruneStat> = masks
            .iter()
            .map(|(site, m)| LayerPruneStat {
                site: site.clone(),
                original: m.original_count,
                kept: m.kept.len(),
                percent_pruned: 100.0 * m.pruned_fraction(),
            })
            .collect();
        layers.sort_by(|a, b| {
            b.percent_pruned
                .total_cmp(&a.percent_pruned)
                .then_with(|| a.site.cmp(&b.site))
        });
        MaskReport { layers }
    }

    pub fn total_original(&self) -> usize {
        self.layers.iter().map(|l| l.original).sum()
    }

    pub fn total_kept(&self) -> usize {
        self.layers.iter().map(|l| l.kept).sum()
    }

    /// Fraction of all gated channels that were pruned.
    pub fn pruned_fraction(&self) -> f64 {
        1.0 - self.total_kept() as f64 / self.total_original().max(1) as f64
    }

    /// The `n` highest per-layer percentages.
    pub fn top(&self, n: usize) -> Vec<f64> {
        self.layers
            .iter()
            .take(n)
            .map(|l| l.percent_pruned)
            .collect()
    }
}

impl fmt::Display for MaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .layers
            .iter()
            .map(|l| l.site.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<w$}  {:>8}  {:>6}  {:>8}",
            "layer", "original", "kept", "pruned%"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<w$}  {:>8}  {:>6}  {:>8.1}",
                l.site, l.original, l.kept, l.percent_pruned
            )?;
        }
        write!(
            f,
            "{:<w$}  {:>8}  {:>6}  {:>8.1}",
            "total",
            self.total_original(),
            self.total_kept(),
            100.0 * self.pruned_fraction()
        )
    }
}

/// Per-gate `α` summary after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStat {
    pub site: String,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

pub fn alpha_stats(graph: &ModelGraph) -> Vec<AlphaStat> {
    gate_sites(graph)
        .into_iter()
        .map(|s| {
            let mut a = s.gate.alpha();
            a.sort_by(f64::total_cmp);
            AlphaStat {
                site: s.site,
                min: a[0],
                median: a[a.len() / 2],
                max: a[a.len() - 1],
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VibTrainReport {
    pub train: TrainReport,
    pub alphas: Vec<AlphaStat>,
    pub regularizer: f64,
}

/// Trains weights and gates jointly on `task loss + γ·R`, with gates in
/// train (noisy) mode.
pub fn train_vib(
    graph: &ModelGraph,
    data: &SyntheticDataset,
    cfg: &VibConfig,
    opts: &TrainOptions,
) -> Result<(ModelGraph, VibTrainReport)> {
    cfg.validate()?;
    if gate_sites(graph).is_empty() {
        return Err(MimoError::Usage(
            "train_vib needs a graph with gates; insert them first".into(),
        ));
    }
    let mut opts = opts.clone();
    opts.vib_gamma = Some(cfg.gamma_reg);
    let (trained, report) = train::train(graph, data, &opts)?;
    let alphas = alpha_stats(&trained);
    let regularizer = vib_regularizer(&trained);
    Ok((
        trained,
        VibTrainReport {
            train: report,
            alphas,
            regularizer,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate(mu: &[f32], ls: f32) -> GateParams {
        GateParams {
            mu: Tensor::vector(mu),
            log_sigma2: Tensor::full(&[mu.len()], ls),
        }
    }

    #[test]
    fn eval_gate_examples() {
        let x = Tensor::from_vec(vec![2, 3, 1, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let y = gate_forward(&x, &gate(&[1.0, 1.0, 1.0], 0.0), GateMode::Eval).unwrap();
        assert!(y.bit_eq(&x));
        let y = gate_forward(&x, &gate(&[1.0, 0.0, 1.0], 0.0), GateMode::Eval).unwrap();
        for n in 0..2 {
            assert_eq!(&y.data()[n * 6 + 2..n * 6 + 4], &[0.0, 0.0]);
        }
        assert!(gate_forward(&x, &gate(&[1.0], 0.0), GateMode::Eval).is_err());
    }

    #[test]
    fn train_gate_is_seeded() {
        let x = Tensor::full(&[4, 2, 2, 2], 1.5);
        let g = gate(&[0.5, 2.0], -1.0);
        let a = gate_forward(&x, &g, GateMode::Train { seed: 9 }).unwrap();
        let b = gate_forward(&x, &g, GateMode::Train { seed: 9 }).unwrap();
        let c = gate_forward(&x, &g, GateMode::Train { seed: 10 }).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn regularizer_values() {
        assert_eq!(
            regularizer_term(&Tensor::vector(&[0.0, 0.0]), &Tensor::vector(&[0.3, -1.0])),
            0.0
        );
        // μ = σ = 1 → log 2
        let r = regularizer_term(&Tensor::vector(&[1.0]), &Tensor::vector(&[0.0]));
        assert!((r - std::f64::consts::LN_2).abs() < 1e-12);
        let mut last = -1.0;
        for m in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let r = regularizer_term(&Tensor::vector(&[-m]), &Tensor::vector(&[-0.7]));
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn mask_thresholds() {
        let cfg = VibConfig::with_gate_count(1);
        assert!(compute_mask(&gate(&[0.0, 0.0], -2.3), &cfg).kept.is_empty());
        // μ = 10, σ = 1 → α = 100
        assert_eq!(compute_mask(&gate(&[10.0], 0.0), &cfg).kept, vec![0]);
        // α exactly τ: μ² = τ with σ = 1
        let at = VibConfig { tau: 0.25, ..cfg };
        assert!(compute_mask(&gate(&[0.5], 0.0), &at).kept.is_empty());
    }

    #[test]
    fn recover_examples() {
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let m = KeptChannels::new(3, vec![1]).unwrap();
        assert_eq!(channel_recover(&x, &m).unwrap().data(), &[0.0, 5.0, 0.0]);
        let full = KeptChannels::all(1);
        assert!(channel_recover(&x, &full).unwrap().bit_eq(&x));
        assert!(channel_recover(&x, &KeptChannels::all(2)).is_err());
    }

    #[test]
    fn kept_channels_validation() {
        assert!(KeptChannels::new(3, vec![0, 0]).is_err());
        assert!(KeptChannels::new(3, vec![3]).is_err());
        assert_eq!(KeptChannels::new(3, vec![2, 0]).unwrap().kept, vec![0, 2]);
    }

    #[test]
    fn report_sorted_descending() {
        let mut masks = MaskSet::new();
        masks.insert("a".into(), KeptChannels::new(10, vec![0, 1, 2]).unwrap());
        masks.insert("b".into(), KeptChannels::new(4, vec![]).unwrap());
        masks.insert("c".into(), KeptChannels::all(8));
        let r = MaskReport::from_masks(&masks);
        assert_eq!(r.top(3), vec![100.0, 70.0, 0.0]);
        assert_eq!(r.total_original(), 22);
        assert!(r.to_string().contains("total"));
    }
}
