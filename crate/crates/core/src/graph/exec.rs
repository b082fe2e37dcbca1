//! Topological evaluation of a [`ModelGraph`].
//!
//! One walker drives three backends: plain inference on tensors, recording
//! onto a gradient [`Tape`], and shape propagation with FLOP counting.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tape, Var};
use crate::error::{MimoError, Result};
use crate::graph::{block_bn_site, ConvBn, ConvLayer, ModelGraph, NodeKind, ResidualBlockParams};
use crate::ops::{self, BnParams, LinearParams};
use crate::passes::quant::{QuantConvParams, QuantLinearParams};
use crate::passes::vib::{self, GateMode, GateParams, KeptChannels};
use crate::tensor::Tensor;

/// Borrowed view of a conv layer's weights.
#[derive(Clone, Copy)]
pub(crate) enum ConvRef<'a> {
    Float(&'a ops::ConvParams),
    Quant(&'a QuantConvParams),
}

impl<'a> From<&'a ConvLayer> for ConvRef<'a> {
    fn from(l: &'a ConvLayer) -> Self {
        match l {
            ConvLayer::Conv(p) | ConvLayer::Biased(p) => ConvRef::Float(p),
            ConvLayer::Quantized(q) => ConvRef::Quant(q),
        }
    }
}

pub(crate) trait Backend {
    type V: Clone;

    fn enter(&mut self, _node: &str) {}
    fn size(&self, _v: &Self::V) -> usize {
        0
    }
    fn observe_live(&mut self, _elements: usize) {}

    fn conv(&mut self, site: &str, x: &Self::V, layer: ConvRef) -> Result<Self::V>;
    fn bn(&mut self, site: &str, x: &Self::V, p: &BnParams) -> Result<Self::V>;
    fn linear(&mut self, site: &str, x: &Self::V, p: &LinearParams) -> Result<Self::V>;
    fn quant_linear(&mut self, site: &str, x: &Self::V, p: &QuantLinearParams) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gate(&mut self, site: &str, x: &Self::V, g: &GateParams) -> Result<Self::V>;
    fn recover(&mut self, x: &Self::V, k: &KeptChannels) -> Result<Self::V>;
}

fn conv_unit<B: Backend>(
    b: &mut B,
    site: &str,
    bn_site: &str,
    x: &B::V,
    unit: &ConvBn,
) -> Result<B::V> {
    let h = b.conv(site, x, (&unit.conv).into())?;
    match &unit.bn {
        Some(bn) => b.bn(bn_site, &h, bn),
        None => Ok(h),
    }
}

fn eval_block<B: Backend>(
    b: &mut B,
    id: &str,
    x: &B::V,
    block: &ResidualBlockParams,
) -> Result<B::V> {
    let bypass = match &block.downsample {
        Some(unit) => conv_unit(
            b,
            &format!("{id}.downsample"),
            &block_bn_site(id, "downsample"),
            x,
            unit,
        )?,
        None => x.clone(),
    };
    let out = match &block.main {
        None => bypass,
        Some(m) => {
            let mut h = conv_unit(
                b,
                &format!("{id}.conv1"),
                &block_bn_site(id, "conv1"),
                x,
                &m.conv1,
            )?;
            if let Some(g) = &m.gate1 {
                h = b.gate(&format!("{id}.gate1"), &h, g)?;
            }
            h = b.relu(&h)?;
            h = conv_unit(
                b,
                &format!("{id}.conv2"),
                &block_bn_site(id, "conv2"),
                &h,
                &m.conv2,
            )?;
            if let Some(g) = &m.gate2 {
                h = b.gate(&format!("{id}.gate2"), &h, g)?;
            }
            if let Some(k) = &m.recover {
                h = b.recover(&h, k)?;
            }
            b.add(&h, &bypass)?
        }
    };
    b.relu(&out)
}

fn eval_node<B: Backend>(b: &mut B, id: &str, kind: &NodeKind, args: &[&B::V]) -> Result<B::V> {
    let x = args[0];
    match kind {
        NodeKind::Conv(p) | NodeKind::BiasedConv(p) => b.conv(id, x, ConvRef::Float(p)),
        NodeKind::QuantizedConv(q) => b.conv(id, x, ConvRef::Quant(q)),
        NodeKind::Bn(p) => b.bn(id, x, p),
        NodeKind::Relu => b.relu(x),
        NodeKind::Linear(p) => b.linear(id, x, p),
        NodeKind::QuantizedLinear(q) => b.quant_linear(id, x, q),
        NodeKind::ResidualBlock(block) => eval_block(b, id, x, block),
        NodeKind::Concat => b.concat(x, args[1]),
        NodeKind::GlobalPool => b.pool(x),
        NodeKind::Gate(g) => b.gate(id, x, g),
        NodeKind::ChannelRecover(k) => b.recover(x, k),
    }
}

/// Walks the graph in topological order and returns every declared output.
pub(crate) fn run<B: Backend>(
    graph: &ModelGraph,
    b: &mut B,
    inputs: BTreeMap<String, B::V>,
) -> Result<BTreeMap<String, B::V>> {
    let order = graph.topo_order()?;
    let outputs: BTreeSet<&str> = graph.outputs.iter().map(|o| o.node.as_str()).collect();
    let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &graph.nodes {
        for i in &n.inputs {
            *remaining.entry(i.as_str()).or_default() += 1;
        }
    }
    let mut values: BTreeMap<String, B::V> = inputs;
    for idx in order {
        let node = &graph.nodes[idx];
        b.enter(&node.id);
        let args: Vec<&B::V> = node
            .inputs
            .iter()
            .map(|i| {
                values.get(i).ok_or_else(|| {
                    MimoError::graph(&node.id, format!("input `{i}` was not provided"))
                })
            })
            .collect::<Result<_>>()?;
        let y = eval_node(b, &node.id, &node.kind, &args).map_err(|e| e.at_node(&node.id))?;
        for i in &node.inputs {
            let r = remaining.get_mut(i.as_str()).expect("counted above");
            *r -= 1;
            if *r == 0 && !outputs.contains(i.as_str()) {
                values.remove(i);
            }
        }
        values.insert(node.id.clone(), y);
        let live = values.values().map(|v| b.size(v)).sum();
        b.observe_live(live);
    }
    graph
        .outputs
        .iter()
        .map(|o| {
            let v = values
                .get(&o.node)
                .cloned()
                .ok_or_else(|| MimoError::graph(&o.node, "output was not computed"))?;
            Ok((o.name.clone(), v))
        })
        .collect()
}

fn check_inputs(graph: &ModelGraph, inputs: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut batch = None;
    for decl in &graph.inputs {
        let t = inputs
            .get(&decl.name)
            .ok_or_else(|| MimoError::graph(&decl.name, "missing input"))?;
        if t.rank() != decl.shape.len() + 1 || t.shape()[1..] != decl.shape[..] {
            return Err(MimoError::graph(
                &decl.name,
                format!(
                    "input shape {:?} does not match declared [N, {:?}]",
                    t.shape(),
                    decl.shape
                ),
            ));
        }
        if *batch.get_or_insert(t.dim(0)) != t.dim(0) {
            return Err(MimoError::graph(
                &decl.name,
                "inputs disagree on batch size",
            ));
        }
    }
    Ok(())
}

/// Plain inference backend. Gates run in eval mode (`y = μ·x`). Optionally
/// records the input of selected conv sites.
pub(crate) struct Infer {
    capture: BTreeSet<String>,
    pub(crate) captured: BTreeMap<String, Tensor>,
}

impl Infer {
    pub(crate) fn new() -> Self {
        Infer {
            capture: BTreeSet::new(),
            captured: BTreeMap::new(),
        }
    }

    pub(crate) fn capturing(sites: impl IntoIterator<Item = String>) -> Self {
        Infer {
            capture: sites.into_iter().collect(),
            captured: BTreeMap::new(),
        }
    }
}

impl Backend for Infer {
    type V = Tensor;

    fn conv(&mut self, site: &str, x: &Tensor, layer: ConvRef) -> Result<Tensor> {
        if self.capture.contains(site) {
            self.captured.insert(site.to_string(), x.clone());
        }
        match layer {
            ConvRef::Float(p) => ops::conv2d(x, p),
            ConvRef::Quant(q) => ops::conv2d(x, &q.dequantized()?),
        }
    }

    fn bn(&mut self, _site: &str, x: &Tensor, p: &BnParams) -> Result<Tensor> {
        ops::batchnorm_infer(x, p)
    }

    fn linear(&mut self, _site: &str, x: &Tensor, p: &LinearParams) -> Result<Tensor> {
        ops::linear(x, &p.weight, &p.bias)
    }

    fn quant_linear(&mut self, _site: &str, x: &Tensor, p: &QuantLinearParams) -> Result<Tensor> {
        let p = p.dequantized()?;
        ops::linear(x, &p.weight, &p.bias)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(x))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }

    fn concat(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::concat_channels(a, b)
    }

    fn pool(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::global_avg_pool(x)
    }

    fn gate(&mut self, _site: &str, x: &Tensor, g: &GateParams) -> Result<Tensor> {
        vib::gate_forward(x, g, GateMode::Eval)
    }

    fn recover(&mut self, x: &Tensor, k: &KeptChannels) -> Result<Tensor> {
        vib::channel_recover(x, k)
    }
}

/// Evaluates all heads in a single pass. Gates use their mean (eval mode).
pub fn forward(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    check_inputs(graph, inputs)?;
    run(graph, &mut Infer::new(), inputs.clone())
}

/// Like [`forward`], also returning the input tensor of each listed conv site.
pub fn forward_capture(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
    sites: &[String],
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
    check_inputs(graph, inputs)?;
    let mut b = Infer::capturing(sites.iter().cloned());
    let out = run(graph, &mut b, inputs.clone())?;
    Ok((out, b.captured))
}

impl Backend for Tape {
    type V = Var;

    fn conv(&mut self, site: &str, x: &Var, layer: ConvRef) -> Result<Var> {
        let (w, b, stride, pad) = match layer {
            ConvRef::Float(p) => (
                self.param(&format!("{site}.weight"), &p.weight),
                self.param(&format!("{site}.bias"), &p.bias),
                p.stride,
                p.padding,
            ),
            ConvRef::Quant(q) => {
                let p = q.dequantized()?;
                (
                    self.constant(p.weight),
                    self.constant(p.bias),
                    p.stride,
                    p.padding,
                )
            }
        };
        self.conv2d(*x, w, b, stride, pad)
    }

    fn bn(&mut self, site: &str, x: &Var, p: &BnParams) -> Result<Var> {
        let g = self.param(&format!("{site}.gamma"), &p.gamma);
        let b = self.param(&format!("{site}.beta"), &p.beta);
        self.batchnorm(*x, g, b, p)
    }

    fn linear(&mut self, site: &str, x: &Var, p: &LinearParams) -> Result<Var> {
        let w = self.param(&format!("{site}.weight"), &p.weight);
        let b = self.param(&format!("{site}.bias"), &p.bias);
        Tape::linear(self, *x, w, b)
    }

    fn quant_linear(&mut self, _site: &str, x: &Var, p: &QuantLinearParams) -> Result<Var> {
        let p = p.dequantized()?;
        let w = self.constant(p.weight);
        let b = self.constant(p.bias);
        Tape::linear(self, *x, w, b)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Ok(Tape::relu(self, *x))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::concat(self, *a, *b)
    }

    fn pool(&mut self, x: &Var) -> Result<Var> {
        self.global_pool(*x)
    }

    fn gate(&mut self, site: &str, x: &Var, g: &GateParams) -> Result<Var> {
        let mu = self.param(&format!("{site}.mu"), &g.mu);
        let ls = self.param(&format!("{site}.log_sigma2"), &g.log_sigma2);
        Tape::gate(self, *x, mu, ls, site)
    }

    fn recover(&mut self, x: &Var, k: &KeptChannels) -> Result<Var> {
        Tape::recover(self, *x, k)
    }
}

/// Records a forward pass onto `tape`, registering every float parameter
/// it touches. Returns the output handles by head name.
pub fn forward_tape(
    graph: &ModelGraph,
    tape: &mut Tape,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Var>> {
    check_inputs(graph, inputs)?;
    let vars = inputs
        .iter()
        .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
        .collect();
    run(graph, tape, vars)
}

/// Shape propagation with operation counting.
#[derive(Default)]
pub(crate) struct ShapeCounter {
    pub(crate) flops: u64,
    pub(crate) per_node: Vec<(String, u64)>,
    pub(crate) peak_live: usize,
    pub(crate) max_temp: usize,
}

fn numel(s: &[usize]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

impl ShapeCounter {
    fn charge(&mut self, n: u64) {
        self.flops += n;
        if let Some(last) = self.per_node.last_mut() {
            last.1 += n;
        }
    }

    fn temp(&mut self, s: &[usize]) {
        self.max_temp = self.max_temp.max(numel(s) as usize);
    }

    fn elementwise(&mut self, x: &[usize], per_elem: u64) -> Vec<usize> {
        self.charge(per_elem * numel(x));
        self.temp(x);
        x.to_vec()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> MimoError {
    MimoError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Backend for ShapeCounter {
    type V = Vec<usize>;

    fn enter(&mut self, node: &str) {
        self.per_node.push((node.to_string(), 0));
    }

    fn size(&self, v: &Vec<usize>) -> usize {
        numel(v) as usize
    }

    fn observe_live(&mut self, elements: usize) {
        self.peak_live = self.peak_live.max(elements);
    }

    fn conv(&mut self, _site: &str, x: &Vec<usize>, layer: ConvRef) -> Result<Vec<usize>> {
        let (w_shape, stride, pad) = match layer {
            ConvRef::Float(p) => (p.weight.shape().to_vec(), p.stride, p.padding),
            ConvRef::Quant(q) => (q.weight.shape.clone(), q.stride, q.padding),
        };
        if x.len() != 4 || x[1] != w_shape[1] {
            return Err(shape_err("conv2d", x, &w_shape));
        }
        let probe = ops::ConvParams {
            weight: Tensor::zeros(&[1, 1, w_shape[2], w_shape[3]]),
            bias: Tensor::zeros(&[1]),
            stride,
            padding: pad,
        };
        let (oh, ow) = probe.output_hw(x[2], x[3])?;
        let y = vec![x[0], w_shape[0], oh, ow];
        self.charge(2 * numel(&w_shape) * (x[0] * oh * ow) as u64);
        self.temp(&y);
        Ok(y)
    }

    fn bn(&mut self, _site: &str, x: &Vec<usize>, p: &BnParams) -> Result<Vec<usize>> {
        if x.len() < 2 || x[1] != p.channels() {
            return Err(shape_err("batchnorm", x, p.gamma.shape()));
        }
        Ok(self.elementwise(x, 2))
    }

    fn linear(&mut self, _site: &str, x: &Vec<usize>, p: &LinearParams) -> Result<Vec<usize>> {
        if x.len() != 2 || x[1] != p.in_features() {
            return Err(shape_err("linear", x, p.weight.shape()));
        }
        self.charge(2 * (x[0] * p.weight.len()) as u64);
        let y = vec![x[0], p.out_features()];
        self.temp(&y);
        Ok(y)
    }

    fn quant_linear(
        &mut self,
        _site: &str,
        x: &Vec<usize>,
        p: &QuantLinearParams,
    ) -> Result<Vec<usize>> {
        let shape = &p.weight.shape;
        if x.len() != 2 || x[1] != shape[1] {
            return Err(shape_err("linear", x, shape));
        }
        self.charge(2 * (x[0] * shape[0] * shape[1]) as u64);
        Ok(vec![x[0], shape[0]])
    }

    fn relu(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(self.elementwise(x, 1))
    }

    fn add(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a != b {
            return Err(shape_err("add", a, b));
        }
        Ok(self.elementwise(a, 1))
    }

    fn concat(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a.len() < 2 || a.len() != b.len() || a[0] != b[0] || a[2..] != b[2..] {
            return Err(shape_err("concat_channels", a, b));
        }
        let mut y = a.clone();
        y[1] += b[1];
        self.temp(&y);
        Ok(y)
    }

    fn pool(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        if x.len() != 4 {
            return Err(shape_err("global_avg_pool", x, &[4]));
        }
        self.charge(numel(x));
        Ok(vec![x[0], x[1]])
    }

    fn gate(&mut self, _site: &str, x: &Vec<usize>, g: &GateParams) -> Result<Vec<usize>> {
        if x.len() < 2 || x[1] != g.channels() {
            return Err(shape_err("gate", x, g.mu.shape()));
        }
        Ok(self.elementwise(x, 1))
    }

    fn recover(&mut self, x: &Vec<usize>, k: &KeptChannels) -> Result<Vec<usize>> {
        if x.len() < 2 || x[1] != k.kept.len() {
            return Err(shape_err("channel_recover", x, &[k.kept.len()]));
        }
        let mut y = x.clone();
        y[1] = k.original_count;
        self.temp(&y);
        Ok(y)
    }
}

/// Runs shape propagation at the given batch size.
pub(crate) fn propagate_shapes(
    graph: &ModelGraph,
    batch: usize,
) -> Result<(ShapeCounter, BTreeMap<String, Vec<usize>>)> {
    graph.validate()?;
    let mut counter = ShapeCounter::default();
    let inputs = graph
        .inputs
        .iter()
        .map(|d| {
            let mut s = vec![batch];
            s.extend(&d.shape);
            (d.name.clone(), s)
        })
        .collect();
    let live_inputs: usize = graph
        .inputs
        .iter()
        .map(|d| batch * d.shape.iter().product::<usize>())
        .sum();
    counter.peak_live = live_inputs;
    let out = run(graph, &mut counter, inputs)?;
    Ok((counter, out))
}
