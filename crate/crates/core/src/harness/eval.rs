//! Accuracy, cost metrics and latency measurement.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use crate::error::{MimoError, Result};
use crate::graph::{count_flops, count_params, forward, MemoryEstimate, ModelGraph};
use crate::tensor::Tensor;

/// Row-wise argmax of `[N, K]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Predicted class per head, computed with one forward pass per batch.
pub fn predict(
    graph: &ModelGraph,
    data: &SyntheticDataset,
    batch: usize,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let inputs = data.batch_inputs(chunk)?;
        for (head, logits) in forward(graph, &inputs)? {
            out.entry(head).or_default().extend(argmax_rows(&logits));
        }
    }
    Ok(out)
}

/// Percentage of matching entries.
pub fn percent_correct(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Accuracy per head, in percent.
pub fn accuracy(graph: &ModelGraph, data: &SyntheticDataset) -> Result<BTreeMap<String, f64>> {
    predict(graph, data, 64)?
        .into_iter()
        .map(|(head, p)| Ok((head.clone(), percent_correct(&p, data.labels(&head)?))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyOptions {
    pub warmup: usize,
    pub passes: usize,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        LatencyOptions {
            warmup: 50,
            passes: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    /// Median over ten equal groups of per-group mean latency.
    pub median_of_means_ms: f64,
    pub passes: usize,
}

/// Times single-sample forward passes on the calling thread.
pub fn measure_latency(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
    opts: LatencyOptions,
) -> Result<LatencyStats> {
    if opts.passes == 0 {
        return Err(MimoError::Config(
            "latency needs at least one timed pass".into(),
        ));
    }
    for _ in 0..opts.warmup {
        std::hint::black_box(forward(graph, inputs)?);
    }
    let mut times = Vec::with_capacity(opts.passes);
    for _ in 0..opts.passes {
        let t = Instant::now();
        std::hint::black_box(forward(graph, inputs)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    let groups = 10.min(times.len());
    let per = times.len() / groups;
    let mut means: Vec<f64> = times
        .chunks(per)
        .take(groups)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean_ms,
        median_of_means_ms: means[means.len() / 2],
        passes: opts.passes,
    })
}

/// One sample from `data` restricted to the inputs `graph` declares.
pub fn single_input(
    graph: &ModelGraph,
    data: &SyntheticDataset,
) -> Result<BTreeMap<String, Tensor>> {
    let all = data.batch_inputs(&[0])?;
    graph
        .inputs
        .iter()
        .map(|d| {
            all.get(&d.name)
                .map(|t| (d.name.clone(), t.clone()))
                .ok_or_else(|| MimoError::graph(&d.name, "dataset has no such input"))
        })
        .collect()
}

/// The part of `graph` needed for one head, as a MISO-style model.
pub fn head_subgraph(graph: &ModelGraph, head: &str) -> Result<ModelGraph> {
    let out = graph
        .outputs
        .iter()
        .find(|o| o.name == head)
        .ok_or_else(|| MimoError::Usage(format!("no head named `{head}`")))?;
    let mut needed = BTreeSet::new();
    let mut stack = vec![out.node.clone()];
    while let Some(id) = stack.pop() {
        if let Some(n) = graph.node(&id) {
            if needed.insert(id.clone()) {
                stack.extend(n.inputs.iter().cloned());
            }
        }
    }
    let mut sub = graph.clone();
    sub.nodes.retain(|n| needed.contains(&n.id));
    sub.outputs.retain(|o| o.name == head);
    let used: BTreeSet<&str> = sub
        .nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .collect();
    sub.inputs.retain(|i| used.contains(i.name.as_str()));
    let ties = std::mem::take(&mut sub.ties);
    sub.ties = ties
        .into_iter()
        .filter(|t| sub.conv_layer(&t.site_a).is_some() && sub.conv_layer(&t.site_b).is_some())
        .collect();
    sub.validate()?;
    Ok(sub)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: String,
    pub acc_task1: Option<f64>,
    pub acc_task2: Option<f64>,
    pub params: usize,
    /// Weight bytes (respecting quantized widths) plus peak activations.
    pub memory_bytes: usize,
    pub weight_bytes: usize,
    pub flops: u64,
    pub latency_ms: f64,
    pub latency_median_of_means_ms: f64,
}

/// Accuracy from a single forward pass per batch, accounting from the
/// graph, latency at batch 1.
pub fn evaluate(
    graph: &ModelGraph,
    test: &SyntheticDataset,
    stage: &str,
    latency: LatencyOptions,
) -> Result<MetricsReport> {
    let acc = accuracy(graph, test)?;
    let mem = MemoryEstimate::of(graph, 1)?;
    let lat = measure_latency(graph, &single_input(graph, test)?, latency)?;
    Ok(MetricsReport {
        stage: stage.to_string(),
        acc_task1: acc.get("task1").copied(),
        acc_task2: acc.get("task2").copied(),
        params: count_params(graph),
        memory_bytes: mem.total(),
        weight_bytes: mem.weight_bytes,
        flops: count_flops(graph, 1)?,
        latency_ms: lat.mean_ms,
        latency_median_of_means_ms: lat.median_of_means_ms,
    })
}
