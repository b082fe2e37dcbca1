//! Folds inference-mode batchnorm into the preceding convolution.
//!
//! With `s_i = γ_i / sqrt(σ²_i + ε)` per output channel:
//! `weight'_i = s_i·weight_i` and `bias'_i = β_i + s_i·(bias_i − μ_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{MimoError, Result};
use crate::graph::{ConvLayer, ModelGraph, NodeKind};
use crate::ops::{BnParams, ConvParams};

pub fn fold_bn(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    if bn.channels() != conv.out_channels() {
        return Err(MimoError::Shape {
            op: "fold_bn",
            left: conv.weight.shape().to_vec(),
            right: bn.gamma.shape().to_vec(),
        });
    }
    let k = conv.fan_in();
    let mut out = conv.clone();
    for (i, s) in bn.scales().into_iter().enumerate() {
        for w in &mut out.weight.data_mut()[i * k..(i + 1) * k] {
            *w = (s * *w as f64) as f32;
        }
        let b = conv.bias.data()[i] as f64;
        out.bias.data_mut()[i] =
            (bn.beta.data()[i] as f64 + s * (b - bn.mean.data()[i] as f64)) as f32;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// Conv sites that absorbed a batchnorm.
    pub folded: Vec<String>,
    /// Batchnorm sites left in place (no foldable conv in front).
    pub skipped: Vec<String>,
}

/// Folds every conv+bn pair, top level and inside residual blocks. A conv
/// with several consumers is left alone, as are batchnorms after anything
/// other than a float conv.
pub fn fold_graph(graph: &ModelGraph) -> Result<(ModelGraph, FoldReport)> {
    graph.validate()?;
    let mut out = graph.clone();
    let mut report = FoldReport::default();
    for node in &mut out.nodes {
        let id = node.id.clone();
        if let NodeKind::ResidualBlock(b) = &mut node.kind {
            let mut units: Vec<(&str, &mut crate::graph::ConvBn)> = Vec::new();
            if let Some(m) = &mut b.main {
                units.push(("conv1", &mut m.conv1));
                units.push(("conv2", &mut m.conv2));
            }
            if let Some(d) = &mut b.downsample {
                units.push(("downsample", d));
            }
            for (slot, unit) in units {
                let Some(bn) = &unit.bn else { continue };
                match &unit.conv {
                    ConvLayer::Conv(p) | ConvLayer::Biased(p) => {
                        unit.conv = ConvLayer::Biased(fold_bn(p, bn).map_err(|e| e.at_node(&id))?);
                        unit.bn = None;
                        report.folded.push(format!("{id}.{slot}"));
                    }
                    ConvLayer::Quantized(_) => {
                        report.skipped.push(crate::graph::block_bn_site(&id, slot))
                    }
                }
            }
        }
    }
    let bn_ids: Vec<String> = out
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Bn(_)))
        .map(|n| n.id.clone())
        .collect();
    for bn_id in bn_ids {
        let node = out.node(&bn_id).expect("listed above");
        let NodeKind::Bn(bn) = &node.kind else {
            unreachable!()
        };
        let bn = bn.clone();
        let conv_id = node.inputs[0].clone();
        let foldable = out.consumers(&conv_id).len() == 1
            && !out.is_output(&conv_id)
            && matches!(
                out.node(&conv_id).map(|n| &n.kind),
                Some(NodeKind::Conv(_) | NodeKind::BiasedConv(_))
            );
        if !foldable {
            report.skipped.push(bn_id);
            continue;
        }
        let conv = out.node_mut(&conv_id).expect("checked");
        let (NodeKind::Conv(p) | NodeKind::BiasedConv(p)) = &conv.kind else {
            unreachable!()
        };
        conv.kind = NodeKind::BiasedConv(fold_bn(p, &bn).map_err(|e| e.at_node(&bn_id))?);
        for n in &mut out.nodes {
            for i in &mut n.inputs {
                if *i == bn_id {
                    *i = conv_id.clone();
                }
            }
        }
        for o in &mut out.outputs {
            if o.node == bn_id {
                o.node = conv_id.clone();
            }
        }
        out.nodes.retain(|n| n.id != bn_id);
        report.folded.push(conv_id);
    }
    out.sync_ties()?;
    Ok((out, report))
}
