//! Mini-batch SGD training on the synthetic dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use crate::autodiff::{Sgd, Tape, Var};
use crate::error::{MimoError, Result};
use crate::graph::{forward_tape, ModelGraph, StorageMut};
use crate::passes::mtz::tie_gradients;
use crate::passes::vib::{gate_sites, GateMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the gate regularizer; `None` trains on the task loss only.
    pub vib_gamma: Option<f32>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            vib_gamma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the untrained model over the first epoch's first batch.
    pub initial_loss: f64,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Records the training loss of one batch: summed per-head mean
/// cross-entropy plus `γ·R` when a regularizer weight is given.
pub fn batch_loss(
    graph: &ModelGraph,
    tape: &mut Tape,
    data: &SyntheticDataset,
    idx: &[usize],
    vib_gamma: Option<f32>,
) -> Result<Var> {
    let inputs = data.batch_inputs(idx)?;
    let outs = forward_tape(graph, tape, &inputs)?;
    let mut loss: Option<Var> = None;
    for (head, logits) in &outs {
        let labels: Vec<usize> = {
            let all = data.labels(head)?;
            idx.iter().map(|&i| all[i]).collect()
        };
        let ce = tape.cross_entropy(*logits, &labels)?;
        loss = Some(match loss {
            None => ce,
            Some(l) => tape.add(l, ce)?,
        });
    }
    let mut loss = loss.ok_or_else(|| MimoError::Usage("graph has no outputs".into()))?;
    if let Some(gamma) = vib_gamma {
        for site in gate_sites(graph) {
            let mu = tape.param(&format!("{}.mu", site.site), &site.gate.mu);
            let ls = tape.param(&format!("{}.log_sigma2", site.site), &site.gate.log_sigma2);
            let r = tape.vib_reg(mu, ls);
            let r = tape.scale(r, gamma);
            loss = tape.add(loss, r)?;
        }
    }
    Ok(loss)
}

/// Trains all learnable float parameters. Gates run in noisy train mode.
/// Deterministic for a fixed seed.
pub fn train(
    graph: &ModelGraph,
    data: &SyntheticDataset,
    opts: &TrainOptions,
) -> Result<(ModelGraph, TrainReport)> {
    if opts.batch_size == 0 {
        return Err(MimoError::Config("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(MimoError::Config("empty training set".into()));
    }
    let mut sgd = Sgd::new(opts.lr, opts.momentum)?;
    let mut g = graph.clone();
    let gated = !gate_sites(&g).is_empty();
    let mut report = TrainReport {
        initial_loss: f64::NAN,
        epoch_losses: Vec::with_capacity(opts.epochs),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(opts.batch_size) {
            let mode = if gated {
                GateMode::Train {
                    seed: step_seed(opts.seed, report.steps),
                }
            } else {
                GateMode::Eval
            };
            let mut tape = Tape::new(mode);
            let loss = batch_loss(&g, &mut tape, data, idx, opts.vib_gamma)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let last = report
                    .epoch_losses
                    .last()
                    .map_or("none".to_string(), |l| format!("{l:.6}"));
                return Err(MimoError::Numerical(format!(
                    "loss became {value} at epoch {epoch}, step {}; last finite epoch loss {last}",
                    report.steps
                )));
            }
            if report.steps == 0 {
                report.initial_loss = value;
            }
            let mut grads = tape.backward(loss)?;
            tie_gradients(&g, &mut grads);
            let mut failure = None;
            g.visit_mut(&mut |key, class, storage| {
                if !class.learnable() || failure.is_some() {
                    return;
                }
                if let (StorageMut::F32(t), Some(grad)) = (storage, grads.get(key)) {
                    if let Err(e) = sgd.step(key, t, grad) {
                        failure = Some(e);
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            g.sync_ties()?;
            sum += value;
            batches += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(sum / batches as f64);
    }
    Ok((g, report))
}
