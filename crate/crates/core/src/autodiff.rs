//! Reverse-mode gradients over a fixed operator set.
//!
//! A [`Tape`] records every operator applied during one forward pass.
//! Parameters enter the tape through [`Tape::param`] under a string key;
//! [`Tape::backward`] returns gradients for exactly those keys.

use std::collections::BTreeMap;

use crate::error::{MimoError, Result};
use crate::ops::{self, BnParams};
use crate::passes::vib::{self, GateMode, KeptChannels};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Bn {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnParams,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Pool(Var),
    Gate {
        x: Var,
        mu: Var,
        log_sigma2: Var,
        /// Standard-normal draws per `(sample, channel)`; `None` in eval mode.
        noise: Option<Vec<f32>>,
    },
    Recover {
        x: Var,
        kept: KeptChannels,
    },
    Scale(Var, f32),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    VibReg {
        mu: Var,
        log_sigma2: Var,
    },
}

struct Entry {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter identifier.
pub type Gradients = BTreeMap<String, Tensor>;

pub struct Tape {
    entries: Vec<Entry>,
    params: BTreeMap<String, Var>,
    gate_mode: GateMode,
}

impl Tape {
    pub fn new(gate_mode: GateMode) -> Self {
        Tape {
            entries: Vec::new(),
            params: BTreeMap::new(),
            gate_mode,
        }
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    /// Records a constant (no gradient is reported for it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a trainable parameter under `key`. Registering the same key
    /// twice returns the original handle.
    pub fn param(&mut self, key: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(key) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.insert(key.to_string(), v);
        v
    }

    pub fn param_keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_raw(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Inference-form batchnorm with trainable `γ`/`β`; running statistics
    /// are taken from `stats` and held fixed.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: &BnParams) -> Result<Var> {
        let mut p = stats.clone();
        p.gamma = self.value(gamma).clone();
        p.beta = self.value(beta).clone();
        let y = ops::batchnorm_infer(self.value(x), &p)?;
        Ok(self.push(
            y,
            Op::Bn {
                x,
                gamma,
                beta,
                stats: p,
            },
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn global_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Pool(x)))
    }

    /// Multiplicative channel gate. `key` seeds the train-mode noise so that
    /// each gate draws an independent, reproducible stream.
    pub fn gate(&mut self, x: Var, mu: Var, log_sigma2: Var, key: &str) -> Result<Var> {
        let xs = self.value(x);
        let c = self.value(mu).len();
        if xs.rank() < 2 || xs.dim(1) != c || self.value(log_sigma2).len() != c {
            return Err(MimoError::Shape {
                op: "gate",
                left: xs.shape().to_vec(),
                right: vec![c],
            });
        }
        let noise = match self.gate_mode {
            GateMode::Eval => None,
            GateMode::Train { seed } => Some(vib::gate_noise(
                vib::site_noise_seed(seed, key),
                xs.dim(0) * c,
            )),
        };
        let z = gate_factors(
            self.value(mu),
            self.value(log_sigma2),
            xs.dim(0),
            noise.as_deref(),
        );
        let y = scale_channels(xs, &z);
        Ok(self.push(
            y,
            Op::Gate {
                x,
                mu,
                log_sigma2,
                noise,
            },
        ))
    }

    pub fn recover(&mut self, x: Var, kept: &KeptChannels) -> Result<Var> {
        let y = vib::channel_recover(self.value(x), kept)?;
        Ok(self.push(
            y,
            Op::Recover {
                x,
                kept: kept.clone(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.dim(0) != labels.len() {
            return Err(MimoError::Shape {
                op: "cross_entropy",
                left: l.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let k = l.dim(1);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(MimoError::Usage(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let (loss, _) = softmax_ce(l, labels);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `Σ_i log(1 + μ_i²/σ_i²)` for one gate.
    pub fn vib_reg(&mut self, mu: Var, log_sigma2: Var) -> Var {
        let r = vib::regularizer_term(self.value(mu), self.value(log_sigma2));
        self.push(Tensor::scalar(r as f32), Op::VibReg { mu, log_sigma2 })
    }

    /// Back-propagates from the scalar `loss` and returns gradients of every
    /// registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(MimoError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let entry = &self.entries[idx];
            let mut flows: Vec<(Var, Tensor)> = Vec::new();
            match &entry.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &dy)?;
                    flows.extend([(*x, dx), (*w, dw), (*b, db)]);
                }
                Op::Bn {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) = ops::batchnorm_backward(self.value(*x), stats, &dy)?;
                    flows.extend([(*x, dx), (*gamma, dg), (*beta, db)]);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dy)?;
                    flows.extend([(*x, dx), (*w, dw), (*b, db)]);
                }
                Op::Relu(x) => {
                    let mut g = dy;
                    for (d, &v) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    flows.push((*x, g));
                }
                Op::Add(a, b) => {
                    flows.push((*a, dy.clone()));
                    flows.push((*b, dy));
                }
                Op::Concat(a, b) => {
                    let (da, db) = ops::split_channels(&dy, self.value(*a).dim(1))?;
                    flows.extend([(*a, da), (*b, db)]);
                }
                Op::Pool(x) => {
                    flows.push((
                        *x,
                        ops::global_avg_pool_backward(self.value(*x).shape(), &dy)?,
                    ));
                }
                Op::Gate {
                    x,
                    mu,
                    log_sigma2,
                    noise,
                } => {
                    let (dx, dmu, dls) = gate_backward(
                        self.value(*x),
                        self.value(*mu),
                        self.value(*log_sigma2),
                        noise.as_deref(),
                        &dy,
                    )?;
                    flows.extend([(*x, dx), (*mu, dmu), (*log_sigma2, dls)]);
                }
                Op::Recover { x, kept } => {
                    flows.push((*x, vib::select_channels(&dy, &kept.kept)?));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    flows.push((*x, dy.map(|v| v * c)));
                }
                Op::CrossEntropy { logits, labels } => {
                    let (_, mut probs) = softmax_ce(self.value(*logits), labels);
                    let k = self.value(*logits).dim(1);
                    let n = labels.len() as f64;
                    let upstream = dy.data()[0] as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        probs[i * k + y] -= 1.0;
                    }
                    let data = probs.iter().map(|&p| (p * upstream / n) as f32).collect();
                    flows.push((
                        *logits,
                        Tensor::from_vec(self.value(*logits).shape().to_vec(), data)?,
                    ));
                }
                Op::VibReg { mu, log_sigma2 } => {
                    let upstream = dy.data()[0] as f64;
                    let (dmu, dls) =
                        vib::regularizer_grad(self.value(*mu), self.value(*log_sigma2));
                    let scale = |v: Vec<f64>| -> Result<Tensor> {
                        Tensor::from_vec(
                            vec![v.len()],
                            v.into_iter().map(|g| (g * upstream) as f32).collect(),
                        )
                    };
                    flows.push((*mu, scale(dmu)?));
                    flows.push((*log_sigma2, scale(dls)?));
                }
            }
            for (v, g) in flows {
                accumulate(&mut grads[v.0], g)?;
            }
        }
        let mut out = Gradients::new();
        for (key, v) in &self.params {
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(*v).shape()),
            };
            out.insert(key.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => *acc = ops::add(acc, &g)?,
    }
    Ok(())
}

/// Stable FNV-1a hash used to derive per-gate noise streams.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Returns `(mean loss, softmax probabilities)`, both in `f64`.
fn softmax_ce(logits: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let k = logits.dim(1);
    let mut probs = Vec::with_capacity(logits.len());
    let mut loss = 0.0f64;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + m - row[y] as f64;
        probs.extend(exps.iter().map(|e| e / z));
    }
    (loss / labels.len() as f64, probs)
}

/// Per-`(sample, channel)` gate values `z = μ + ε·σ` (or `μ` without noise).
fn gate_factors(mu: &Tensor, log_sigma2: &Tensor, n: usize, noise: Option<&[f32]>) -> Vec<f32> {
    let c = mu.len();
    let mut z = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            let m = mu.data()[ch];
            z.push(match noise {
                None => m,
                Some(eps) => {
                    let sigma = (0.5 * log_sigma2.data()[ch]).exp();
                    m + eps[i * c + ch] * sigma
                }
            });
        }
    }
    z
}

/// Multiplies channel `(n, c)` of `x` by `z[n·C + c]`.
fn scale_channels(x: &Tensor, z: &[f32]) -> Tensor {
    let inner: usize = x.shape()[2..].iter().product();
    let mut y = x.clone();
    for (chunk, &f) in y.data_mut().chunks_mut(inner).zip(z) {
        for v in chunk {
            *v *= f;
        }
    }
    y
}

fn gate_backward(
    x: &Tensor,
    mu: &Tensor,
    log_sigma2: &Tensor,
    noise: Option<&[f32]>,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.dim(0);
    let c = mu.len();
    let inner: usize = x.shape()[2..].iter().product();
    let z = gate_factors(mu, log_sigma2, n, noise);
    let dx = scale_channels(dy, &z);
    let mut dmu = vec![0.0f64; c];
    let mut dls = vec![0.0f64; c];
    for (idx, (xc, dc)) in x
        .data()
        .chunks(inner)
        .zip(dy.data().chunks(inner))
        .enumerate()
    {
        let ch = idx % c;
        let dz: f64 = xc.iter().zip(dc).map(|(&a, &b)| a as f64 * b as f64).sum();
        dmu[ch] += dz;
        if let Some(eps) = noise {
            let sigma = (0.5 * log_sigma2.data()[ch] as f64).exp();
            dls[ch] += dz * eps[idx] as f64 * sigma * 0.5;
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec(vec![c], v.into_iter().map(|g| g as f32).collect());
    Ok((dx, to_t(dmu)?, to_t(dls)?))
}

/// Momentum SGD: `v ← momentum·v + grad; p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(MimoError::Config(format!(
                "sgd needs lr >= 0 and momentum in [0,1), got lr={lr} momentum={momentum}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Updates one parameter in place from its gradient.
    pub fn step(&mut self, key: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(MimoError::Shape {
                op: "sgd_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let v = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for ((p, vel), &g) in param
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(grad.data())
        {
            *vel = self.momentum * *vel + g;
            *p -= self.lr * *vel;
        }
        Ok(())
    }
}
