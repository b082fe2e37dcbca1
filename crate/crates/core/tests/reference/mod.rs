//! Straightforward f64 interpreter of a float model graph, used as the
//! finite-difference oracle for the tape gradients. Shares no numerics with
//! the library: convolutions are direct loops and every value is f64.

use std::collections::BTreeMap;

use mimo_core::graph::{ConvBn, ConvLayer, NodeKind, ResidualBlockParams, Storage};
use mimo_core::ops::ConvParams;
use mimo_core::passes::vib::{gate_noise, gate_sites, site_noise_seed};
use mimo_core::{ModelGraph, Tensor};

#[derive(Clone)]
struct T {
    shape: Vec<usize>,
    d: Vec<f64>,
}

impl T {
    fn from(t: &Tensor) -> T {
        T {
            shape: t.shape().to_vec(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Every float parameter of a graph in f64, keyed like [`ModelGraph::visit`].
pub struct Reference<'a> {
    graph: &'a ModelGraph,
    pub params: BTreeMap<String, Vec<f64>>,
    noise_seed: u64,
}

/// Loss and the sign of every ReLU input, in evaluation order.
pub struct Eval {
    pub loss: f64,
    pub logits: BTreeMap<String, Vec<f64>>,
    pub signs: Vec<bool>,
}

impl<'a> Reference<'a> {
    pub fn new(graph: &'a ModelGraph, noise_seed: u64) -> Self {
        let mut params = BTreeMap::new();
        graph.visit(&mut |k, _, s| {
            if let Storage::F32(t) = s {
                params.insert(k.to_string(), t.data().iter().map(|&v| v as f64).collect());
            }
        });
        Reference {
            graph,
            params,
            noise_seed,
        }
    }

    fn p(&self, key: &str) -> &[f64] {
        self.params
            .get(key)
            .unwrap_or_else(|| panic!("no parameter {key}"))
    }

    /// Training loss: summed per-head mean cross-entropy plus `gamma·R`.
    pub fn eval(
        &self,
        inputs: &BTreeMap<String, Tensor>,
        labels: &BTreeMap<String, Vec<usize>>,
        gamma: f64,
    ) -> Eval {
        let mut signs = Vec::new();
        let mut values: BTreeMap<String, T> = inputs
            .iter()
            .map(|(k, v)| (k.clone(), T::from(v)))
            .collect();
        for idx in self.graph.topo_order().unwrap() {
            let node = &self.graph.nodes[idx];
            let x = &values[&node.inputs[0]];
            let id = node.id.as_str();
            let y = match &node.kind {
                NodeKind::Conv(c) | NodeKind::BiasedConv(c) => self.conv(id, x, c),
                NodeKind::Bn(b) => self.bn(id, x, b.eps as f64),
                NodeKind::Relu => relu(x, &mut signs),
                NodeKind::Linear(_) => self.linear(id, x),
                NodeKind::ResidualBlock(b) => self.block(id, x, b, &mut signs),
                NodeKind::Concat => concat(x, &values[&node.inputs[1]]),
                NodeKind::GlobalPool => pool(x),
                NodeKind::Gate(_) => self.gate(id, x),
                NodeKind::ChannelRecover(k) => recover(x, &k.kept, k.original_count),
                other => panic!("reference has no {}", other.name()),
            };
            values.insert(node.id.clone(), y);
        }
        let mut loss = 0.0;
        let mut logits = BTreeMap::new();
        for o in &self.graph.outputs {
            let z = &values[&o.node];
            let (n, k) = (z.shape[0], z.shape[1]);
            for (r, &label) in labels[&o.name].iter().enumerate().take(n) {
                let row = &z.d[r * k..(r + 1) * k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += (lse - row[label]) / n as f64;
            }
            logits.insert(o.name.clone(), z.d.clone());
        }
        for s in gate_sites(self.graph) {
            let mu = self.p(&format!("{}.mu", s.site));
            let ls = self.p(&format!("{}.log_sigma2", s.site));
            for (m, l) in mu.iter().zip(ls) {
                loss += gamma * (m * m / l.exp()).ln_1p();
            }
        }
        Eval {
            loss,
            logits,
            signs,
        }
    }

    fn conv(&self, site: &str, x: &T, c: &ConvParams) -> T {
        let w = self.p(&format!("{site}.weight"));
        let b = self.p(&format!("{site}.bias"));
        let (stride, pad) = (c.stride, c.padding);
        let (n, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (cout, kh, kw) = (c.weight.dim(0), c.weight.dim(2), c.weight.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut d = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for o in 0..cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for ch in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let (r, q) = (i * stride + ki, j * stride + kj);
                                    if r < pad || q < pad || r - pad >= h || q - pad >= wd {
                                        continue;
                                    }
                                    acc += w[((o * cin + ch) * kh + ki) * kw + kj]
                                        * x.d[((s * cin + ch) * h + r - pad) * wd + q - pad];
                                }
                            }
                        }
                        d[((s * cout + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        T {
            shape: vec![n, cout, oh, ow],
            d,
        }
    }

    fn bn(&self, site: &str, x: &T, eps: f64) -> T {
        let g = self.p(&format!("{site}.gamma"));
        let b = self.p(&format!("{site}.beta"));
        let m = self.p(&format!("{site}.mean"));
        let v = self.p(&format!("{site}.var"));
        per_channel(x, |c, val| g[c] * (val - m[c]) / (v[c] + eps).sqrt() + b[c])
    }

    fn linear(&self, site: &str, x: &T) -> T {
        let w = self.p(&format!("{site}.weight"));
        let b = self.p(&format!("{site}.bias"));
        let (n, f) = (x.shape[0], x.shape[1]);
        let g = b.len();
        let mut d = Vec::with_capacity(n * g);
        for s in 0..n {
            for o in 0..g {
                let row = &w[o * f..(o + 1) * f];
                d.push(
                    b[o] + row
                        .iter()
                        .zip(&x.d[s * f..(s + 1) * f])
                        .map(|(a, c)| a * c)
                        .sum::<f64>(),
                );
            }
        }
        T {
            shape: vec![n, g],
            d,
        }
    }

    fn gate(&self, site: &str, x: &T) -> T {
        let mu = self.p(&format!("{site}.mu"));
        let ls = self.p(&format!("{site}.log_sigma2"));
        let (n, c) = (x.shape[0], x.shape[1]);
        let eps = gate_noise(site_noise_seed(self.noise_seed, site), n * c);
        let inner = x.d.len() / (n * c);
        let mut y = x.clone();
        for (i, chunk) in y.d.chunks_mut(inner).enumerate() {
            let ch = i % c;
            let z = mu[ch] + eps[i] as f64 * (0.5 * ls[ch]).exp();
            chunk.iter_mut().for_each(|v| *v *= z);
        }
        y
    }

    fn unit(&self, site: &str, bn_site: &str, x: &T, u: &ConvBn) -> T {
        let h = match &u.conv {
            ConvLayer::Conv(c) | ConvLayer::Biased(c) => self.conv(site, x, c),
            ConvLayer::Quantized(_) => panic!("reference needs float weights"),
        };
        match &u.bn {
            Some(b) => self.bn(bn_site, &h, b.eps as f64),
            None => h,
        }
    }

    fn block(&self, id: &str, x: &T, b: &ResidualBlockParams, signs: &mut Vec<bool>) -> T {
        let bypass = match &b.downsample {
            Some(u) => self.unit(
                &format!("{id}.downsample"),
                &format!("{id}.downsample_bn"),
                x,
                u,
            ),
            None => x.clone(),
        };
        let out = match &b.main {
            None => bypass,
            Some(m) => {
                let mut h = self.unit(&format!("{id}.conv1"), &format!("{id}.bn1"), x, &m.conv1);
                if m.gate1.is_some() {
                    h = self.gate(&format!("{id}.gate1"), &h);
                }
                h = relu(&h, signs);
                h = self.unit(&format!("{id}.conv2"), &format!("{id}.bn2"), &h, &m.conv2);
                if m.gate2.is_some() {
                    h = self.gate(&format!("{id}.gate2"), &h);
                }
                if let Some(k) = &m.recover {
                    h = recover(&h, &k.kept, k.original_count);
                }
                for (a, v) in h.d.iter_mut().zip(&bypass.d) {
                    *a += v;
                }
                h
            }
        };
        relu(&out, signs)
    }
}

fn per_channel(x: &T, f: impl Fn(usize, f64) -> f64) -> T {
    let c = x.shape[1];
    let inner: usize = x.shape[2..].iter().product();
    let mut y = x.clone();
    for (i, chunk) in y.d.chunks_mut(inner).enumerate() {
        chunk.iter_mut().for_each(|v| *v = f(i % c, *v));
    }
    y
}

fn relu(x: &T, signs: &mut Vec<bool>) -> T {
    signs.extend(x.d.iter().map(|&v| v > 0.0));
    T {
        shape: x.shape.clone(),
        d: x.d.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn concat(a: &T, b: &T) -> T {
    let n = a.shape[0];
    let (sa, sb) = (a.d.len() / n, b.d.len() / n);
    let mut d = Vec::with_capacity(a.d.len() + b.d.len());
    for i in 0..n {
        d.extend_from_slice(&a.d[i * sa..(i + 1) * sa]);
        d.extend_from_slice(&b.d[i * sb..(i + 1) * sb]);
    }
    let mut shape = a.shape.clone();
    shape[1] += b.shape[1];
    T { shape, d }
}

fn pool(x: &T) -> T {
    let inner = x.shape[2] * x.shape[3];
    T {
        shape: vec![x.shape[0], x.shape[1]],
        d: x.d
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect(),
    }
}

fn recover(x: &T, kept: &[usize], full: usize) -> T {
    let (n, c) = (x.shape[0], x.shape[1]);
    let inner: usize = x.shape[2..].iter().product();
    let mut d = vec![0.0; n * full * inner];
    for s in 0..n {
        for (j, &ch) in kept.iter().enumerate().take(c) {
            let src = (s * c + j) * inner;
            let dst = (s * full + ch) * inner;
            d[dst..dst + inner].copy_from_slice(&x.d[src..src + inner]);
        }
    }
    let mut shape = x.shape.clone();
    shape[1] = full;
    T { shape, d }
}
