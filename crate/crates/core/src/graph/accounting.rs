//! Parameter, FLOP and memory accounting.
//!
//! FLOPs count a multiply-add as two operations: `2·Cout·Cin·kH·kW·H'·W'`
//! per sample for conv and `2·G·F` for linear. Element-wise nodes cost one
//! per output element (batchnorm two: scale and shift). Concatenation and
//! channel recovery are data movement and cost nothing.

use serde::{Deserialize, Serialize};

use super::exec::propagate_shapes;
use super::{ModelGraph, Storage};
use crate::error::{MimoError, Result};

/// Learnable element count. BN running statistics are excluded, gates are
/// included while present, and each tied filter is counted once.
pub fn count_params(graph: &ModelGraph) -> usize {
    let mut total = 0;
    graph.visit(&mut |_, class, storage| {
        if class.learnable() {
            total += storage.len();
        }
    });
    let shared: usize = graph
        .ties
        .iter()
        .filter_map(|t| graph.conv_layer(&t.site_b).map(|l| l.fan_in() + 1))
        .sum();
    total - shared
}

/// Total FLOPs for one forward pass at `batch`.
pub fn count_flops(graph: &ModelGraph, batch: usize) -> Result<u64> {
    Ok(propagate_shapes(graph, batch)?.0.flops)
}

/// FLOPs per top-level node, in evaluation order. Sums to [`count_flops`].
pub fn node_flops(graph: &ModelGraph, batch: usize) -> Result<Vec<(String, u64)>> {
    Ok(propagate_shapes(graph, batch)?.0.per_node)
}

/// Analytic model memory: stored weight bytes plus the peak activation
/// footprint of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// `f32` tensors at 4 bytes, codes at their packed width.
    pub weight_bytes: usize,
    /// Float tensors that were quantized, at 4 bytes per element.
    pub float_equivalent_bytes: usize,
    /// Bytes of quantized code storage alone.
    pub code_bytes: usize,
    /// Peak bytes of simultaneously live activations (plus the largest
    /// intermediate inside a node).
    pub activation_bytes: usize,
}

impl MemoryEstimate {
    pub fn of(graph: &ModelGraph, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(MimoError::Usage("memory estimate needs batch >= 1".into()));
        }
        let mut est = MemoryEstimate {
            weight_bytes: 0,
            float_equivalent_bytes: 0,
            code_bytes: 0,
            activation_bytes: 0,
        };
        graph.visit(&mut |_, _, storage| match storage {
            Storage::F32(t) => est.weight_bytes += 4 * t.len(),
            Storage::Codes(q) => {
                est.weight_bytes += q.code_bytes();
                est.code_bytes += q.code_bytes();
                est.float_equivalent_bytes += 4 * q.len();
            }
        });
        let (counter, _) = propagate_shapes(graph, batch)?;
        est.activation_bytes = 4 * (counter.peak_live + counter.max_temp);
        Ok(est)
    }

    pub fn total(&self) -> usize {
        self.weight_bytes + self.activation_bytes
    }
}
