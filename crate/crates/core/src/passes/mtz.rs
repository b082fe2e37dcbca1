//! Cross-branch neuron merging.
//!
//! Two neurons (conv filters flattened to vectors, bias appended) are
//! compared with the Hessian-weighted distance
//!
//! ```text
//! d(wA, wB) = ½ Δᵀ (HA⁻¹ + HB⁻¹)⁻¹ Δ,   Δ = wA − wB
//! ```
//!
//! evaluated as `½ Δᵀ HA (HA + HB)⁻¹ HB Δ` so that no inverse is formed.
//! A merged pair takes the minimizer of the summed quadratic penalties,
//! `ŵ = (HA + HB)⁻¹ (HA wA + HB wB)`. Each layer Hessian is the damped second
//! moment of the layer's input patches: `H = (1/n) Σ x xᵀ + λ I`.
//!
//! Merging works on the batchnorm-effective filter (scale and shift folded
//! in), since that is the function the channel actually computes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{MimoError, Result};
use crate::graph::exec::forward_capture;
use crate::graph::{count_params, ModelGraph, Tie};
use crate::ops::{unfold_patches, BnParams, ConvParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Damping {
    Absolute(f64),
    /// `λ = c · trace(S)/F` of the undamped second moment `S`.
    RelativeTrace(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::RelativeTrace(1e-3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianEstimate {
    pub matrix: DMatrix<f64>,
    pub sample_count: usize,
    pub damping: f64,
}

impl HessianEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `H = S + λI` from an undamped second moment.
    fn damped(mut s: DMatrix<f64>, n: usize, damping: Damping) -> Result<Self> {
        let f = s.nrows();
        let lambda = match damping {
            Damping::Absolute(l) => l,
            Damping::RelativeTrace(c) => {
                let l = c * s.trace() / f as f64;
                // all-zero activations would leave H singular
                if l > 0.0 {
                    l
                } else {
                    c
                }
            }
        };
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(MimoError::Usage(format!(
                "hessian damping must be positive, got {lambda}"
            )));
        }
        for i in 0..f {
            s[(i, i)] += lambda;
        }
        Ok(HessianEstimate {
            matrix: s,
            sample_count: n,
            damping: lambda,
        })
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(MimoError::Usage(
                "hessian must be a non-empty square matrix".into(),
            ));
        }
        Ok(HessianEstimate {
            matrix,
            sample_count: 0,
            damping: 0.0,
        })
    }

    pub fn identity(dim: usize) -> Self {
        HessianEstimate {
            matrix: DMatrix::identity(dim, dim),
            sample_count: 0,
            damping: 0.0,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        HessianEstimate {
            matrix: &self.matrix * c,
            sample_count: self.sample_count,
            damping: self.damping * c,
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = &self.matrix;
        (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
    }
}

/// `H̃ = (1/n)·Σ x xᵀ + λI` over activation vectors of equal length.
pub fn estimate_hessian(activations: &[Tensor], damping: Damping) -> Result<HessianEstimate> {
    let first = activations
        .first()
        .ok_or_else(|| MimoError::Usage("hessian estimate needs at least one activation".into()))?;
    let f = first.len();
    let rows: Vec<&[f32]> = activations.iter().map(|t| t.data()).collect();
    if rows.iter().any(|r| r.len() != f) {
        return Err(MimoError::Usage(
            "activation vectors differ in length".into(),
        ));
    }
    second_moment(&rows, f, false, damping)
}

fn second_moment(
    rows: &[&[f32]],
    f: usize,
    augment: bool,
    damping: Damping,
) -> Result<HessianEstimate> {
    let dim = f + augment as usize;
    let n = rows.len();
    let x = DMatrix::from_fn(n, dim, |r, c| if c < f { rows[r][c] as f64 } else { 1.0 });
    let mut s = x.tr_mul(&x) / n as f64;
    // exact symmetry regardless of summation order
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    HessianEstimate::damped(s, n, damping)
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let diag = m.diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Cholesky::new(m).ok_or_else(|| {
        MimoError::Numerical(format!(
            "{what} is not positive definite (diagonal range {lo:.3e}..{hi:.3e}, ratio {:.3e})",
            hi / lo
        ))
    })
}

/// Precomputed distance metric for one layer pair:
/// `M = HA (HA + HB)⁻¹ HB` and the factorization of `HA + HB`.
pub struct PairMetric {
    m: DMatrix<f64>,
    sum: Cholesky<f64, Dyn>,
    ha: DMatrix<f64>,
    hb: DMatrix<f64>,
}

impl PairMetric {
    pub fn new(ha: &HessianEstimate, hb: &HessianEstimate) -> Result<Self> {
        if ha.dim() != hb.dim() {
            return Err(MimoError::Usage(format!(
                "hessian dimensions differ: {} vs {}",
                ha.dim(),
                hb.dim()
            )));
        }
        cholesky(ha.matrix.clone(), "hessian A")?;
        cholesky(hb.matrix.clone(), "hessian B")?;
        let sum = cholesky(&ha.matrix + &hb.matrix, "hessian sum")?;
        let x = sum.solve(&hb.matrix);
        let mut m = &ha.matrix * x;
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(PairMetric {
            m,
            sum,
            ha: ha.matrix.clone(),
            hb: hb.matrix.clone(),
        })
    }

    fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.m.nrows() {
            return Err(MimoError::Usage(format!(
                "weight length {} does not match hessian dimension {}",
                w.len(),
                self.m.nrows()
            )));
        }
        Ok(())
    }

    pub fn distance(&self, wa: &[f64], wb: &[f64]) -> Result<f64> {
        self.check(wa)?;
        self.check(wb)?;
        if wa == wb {
            return Ok(0.0);
        }
        let delta = DVector::from_iterator(wa.len(), wa.iter().zip(wb).map(|(a, b)| a - b));
        Ok((0.5 * delta.dot(&(&self.m * &delta))).max(0.0))
    }

    pub fn merged(&self, wa: &[f64], wb: &[f64]) -> Result<Vec<f64>> {
        self.check(wa)?;
        self.check(wb)?;
        if wa == wb {
            return Ok(wa.to_vec());
        }
        let a = DVector::from_column_slice(wa);
        let b = DVector::from_column_slice(wb);
        let rhs = &self.ha * a + &self.hb * b;
        Ok(self.sum.solve(&rhs).iter().copied().collect())
    }
}

pub fn neuron_distance(
    wa: &[f64],
    wb: &[f64],
    ha: &HessianEstimate,
    hb: &HessianEstimate,
) -> Result<f64> {
    PairMetric::new(ha, hb)?.distance(wa, wb)
}

pub fn merged_weight(
    wa: &[f64],
    wb: &[f64],
    ha: &HessianEstimate,
    hb: &HessianEstimate,
) -> Result<Vec<f64>> {
    PairMetric::new(ha, hb)?.merged(wa, wb)
}

/// `½(w−wA)ᵀHA(w−wA) + ½(w−wB)ᵀHB(w−wB)`; its minimum over `w` is the
/// neuron distance.
pub fn merge_objective(
    w: &[f64],
    wa: &[f64],
    wb: &[f64],
    ha: &HessianEstimate,
    hb: &HessianEstimate,
) -> f64 {
    let quad = |h: &DMatrix<f64>, other: &[f64]| {
        let d = DVector::from_iterator(w.len(), w.iter().zip(other).map(|(x, y)| x - y));
        0.5 * d.dot(&(h * &d))
    };
    quad(&ha.matrix, wa) + quad(&hb.matrix, wb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePair {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub merged: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub site_a: String,
    pub site_b: String,
    pub budget: usize,
    /// Ascending by distance.
    pub pairs: Vec<MergePair>,
}

/// Greedy pairing: repeatedly takes the unused pair with the smallest
/// distance, ties broken by `a` then `b` ascending.
pub fn plan_merge(
    layer_a: &[Vec<f64>],
    layer_b: &[Vec<f64>],
    ha: &HessianEstimate,
    hb: &HessianEstimate,
    budget: usize,
) -> Result<MergePlan> {
    if budget > layer_a.len().min(layer_b.len()) {
        return Err(MimoError::Usage(format!(
            "merge budget {budget} exceeds layer widths {} and {}",
            layer_a.len(),
            layer_b.len()
        )));
    }
    let mut plan = MergePlan {
        site_a: String::new(),
        site_b: String::new(),
        budget,
        pairs: Vec::new(),
    };
    if budget == 0 {
        return Ok(plan);
    }
    let metric = PairMetric::new(ha, hb)?;
    let mut all = Vec::with_capacity(layer_a.len() * layer_b.len());
    for (i, wa) in layer_a.iter().enumerate() {
        for (j, wb) in layer_b.iter().enumerate() {
            all.push((metric.distance(wa, wb)?, i, j));
        }
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    for (d, i, j) in all {
        if plan.pairs.len() == budget {
            break;
        }
        if used_a.contains(&i) || used_b.contains(&j) {
            continue;
        }
        used_a.insert(i);
        used_b.insert(j);
        plan.pairs.push(MergePair {
            a: i,
            b: j,
            distance: d,
            merged: metric.merged(&layer_a[i], &layer_b[j])?,
        });
    }
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Merges per aligned layer pair, in branch order; missing entries are
    /// 0. A single entry applies to every pair. Budgets are capped at the
    /// narrower layer's width.
    pub budgets: Vec<usize>,
    pub damping: Damping,
    /// Maximum number of input patches sampled per Hessian.
    pub patch_cap: usize,
    pub seed: u64,
}

impl MergeConfig {
    pub fn new(budgets: Vec<usize>, seed: u64) -> Self {
        MergeConfig {
            budgets,
            damping: Damping::default(),
            patch_cap: 10_000,
            seed,
        }
    }
}

/// Parses a comma-separated budget list such as `0,2,2,4`.
pub fn parse_budgets(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| MimoError::Config(format!("bad merge budget `{s}` in `{spec}`")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMergeReport {
    pub site_a: String,
    pub site_b: String,
    pub merged: usize,
    pub mean_distance: f64,
    pub max_distance: f64,
    pub param_delta: i64,
    /// Why the pair was left alone, if it was.
    #[serde(default)]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub layers: Vec<LayerMergeReport>,
    pub params_before: usize,
    pub params_after: usize,
}

impl fmt::Display for MergeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .layers
            .iter()
            .map(|l| l.site_b.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<w$}  {:<w$}  {:>6}  {:>10}  {:>10}  {:>8}",
            "layer_a", "layer_b", "merged", "mean_d", "max_d", "params"
        )?;
        for l in &self.layers {
            if let Some(why) = &l.skipped {
                writeln!(f, "{:<w$}  {:<w$}  skipped: {why}", l.site_a, l.site_b)?;
                continue;
            }
            writeln!(
                f,
                "{:<w$}  {:<w$}  {:>6}  {:>10.3e}  {:>10.3e}  {:>8}",
                l.site_a, l.site_b, l.merged, l.mean_distance, l.max_distance, l.param_delta
            )?;
        }
        write!(f, "params {} -> {}", self.params_before, self.params_after)
    }
}

/// Ids of nodes reachable from `start`.
fn reachable(graph: &ModelGraph, start: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start.to_string()];
    while let Some(id) = stack.pop() {
        for c in graph.consumers(&id) {
            if seen.insert(c.to_string()) {
                stack.push(c.to_string());
            }
        }
    }
    seen
}

fn branch_conv_sites(graph: &ModelGraph, only: &BTreeSet<String>) -> Vec<String> {
    graph
        .conv_sites()
        .into_iter()
        .filter(|s| {
            let id = s
                .rsplit_once('.')
                .filter(|(_, slot)| matches!(*slot, "conv1" | "conv2" | "downsample"));
            only.contains(id.map_or(s.as_str(), |(id, _)| id))
        })
        .collect()
}

/// Conv sites of the two input branches, paired by their name below the
/// branch prefix (`image.block1.conv1` with `audio.block1.conv1`), in
/// branch-A order. Sites reachable from both inputs (the fused trunk) are
/// left out, as are main-path sites of a block that pruning reduced to its
/// bypass in only one branch. Branches whose node layouts differ are
/// rejected at the first differing node.
pub fn aligned_sites(graph: &ModelGraph) -> Result<Vec<(String, String)>> {
    if graph.inputs.len() != 2 {
        return Err(MimoError::Usage(format!(
            "merging needs exactly two input branches, graph has {}",
            graph.inputs.len()
        )));
    }
    let ra = reachable(graph, &graph.inputs[0].name);
    let rb = reachable(graph, &graph.inputs[1].name);
    let only_a: BTreeSet<String> = ra.difference(&rb).cloned().collect();
    let only_b: BTreeSet<String> = rb.difference(&ra).cloned().collect();
    let suffix = |s: &str| s.split_once('.').map(|(_, rest)| rest.to_string());
    let layout = |only: &BTreeSet<String>| -> Vec<(String, Option<String>)> {
        graph
            .nodes
            .iter()
            .filter(|n| only.contains(&n.id))
            .map(|n| (n.id.clone(), suffix(&n.id)))
            .collect()
    };
    let (la, lb) = (layout(&only_a), layout(&only_b));
    for i in 0..la.len().max(lb.len()) {
        let (a, b) = (la.get(i), lb.get(i));
        if a.map(|x| &x.1) != b.map(|x| &x.1) {
            let name = a.or(b).map(|x| x.0.clone()).unwrap_or_default();
            return Err(MimoError::graph(name, "branches diverge here"));
        }
    }
    let by_suffix: BTreeMap<String, String> = branch_conv_sites(graph, &only_b)
        .into_iter()
        .filter_map(|s| suffix(&s).map(|k| (k, s)))
        .collect();
    Ok(branch_conv_sites(graph, &only_a)
        .into_iter()
        .filter_map(|sa| {
            let sb = by_suffix.get(&suffix(&sa)?)?.clone();
            Some((sa, sb))
        })
        .collect())
}

/// Flattened filters with the bias appended, after applying `bn`.
fn effective_rows(p: &ConvParams, bn: Option<&BnParams>) -> Vec<Vec<f64>> {
    let k = p.fan_in();
    let scales = bn.map(|b| b.scales());
    (0..p.out_channels())
        .map(|i| {
            let w = &p.weight.data()[i * k..(i + 1) * k];
            let b = p.bias.data()[i] as f64;
            match (bn, &scales) {
                (Some(bn), Some(s)) => {
                    let s = s[i];
                    let mut row: Vec<f64> = w.iter().map(|&v| s * v as f64).collect();
                    row.push(s * (b - bn.mean.data()[i] as f64) + bn.beta.data()[i] as f64);
                    row
                }
                _ => {
                    let mut row: Vec<f64> = w.iter().map(|&v| v as f64).collect();
                    row.push(b);
                    row
                }
            }
        })
        .collect()
}

fn float_conv(graph: &ModelGraph, site: &str) -> Result<ConvParams> {
    match graph.conv_layer(site) {
        Some(crate::graph::ConvLayer::Conv(p)) | Some(crate::graph::ConvLayer::Biased(p)) => Ok(p),
        Some(_) => Err(MimoError::graph(site, "cannot merge quantized layers")),
        None => Err(MimoError::graph(site, "missing conv site")),
    }
}

fn layer_hessian(
    input: &Tensor,
    p: &ConvParams,
    cfg: &MergeConfig,
    stream: u64,
) -> Result<HessianEstimate> {
    let patches = unfold_patches(input, p)?;
    let chosen: Vec<&[f32]> = if patches.len() > cfg.patch_cap {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut idx = rand::seq::index::sample(&mut rng, patches.len(), cfg.patch_cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| patches[i].as_slice()).collect()
    } else {
        patches.iter().map(Vec::as_slice).collect()
    };
    second_moment(&chosen, p.fan_in(), true, cfg.damping)
}

/// Writes one merged filter into a site: either a verbatim copy of another
/// filter (with its batchnorm channel) or an effective vector with a
/// pass-through batchnorm channel.
fn write_filter(
    graph: &mut ModelGraph,
    site: &str,
    filter: usize,
    row: &[f64],
    bn_identity: bool,
) -> Result<()> {
    {
        let mut layer = graph
            .conv_layer_mut(site)
            .ok_or_else(|| MimoError::graph(site, "missing conv site"))?;
        let p = layer
            .float_mut()
            .ok_or_else(|| MimoError::graph(site, "cannot merge quantized layers"))?;
        let k = p.fan_in();
        for (dst, &v) in p.weight.data_mut()[filter * k..(filter + 1) * k]
            .iter_mut()
            .zip(row)
        {
            *dst = v as f32;
        }
        p.bias.data_mut()[filter] = row[k] as f32;
    }
    if bn_identity {
        if let Some(bn) = graph.site_bn_mut(site) {
            bn.gamma.data_mut()[filter] = 1.0;
            bn.beta.data_mut()[filter] = 0.0;
            bn.mean.data_mut()[filter] = 0.0;
            bn.var.data_mut()[filter] = 1.0 - bn.eps;
        }
    }
    Ok(())
}

/// Merges neurons across the two input branches, layer after layer. Later
/// layers see calibration activations of the already merged earlier
/// layers. Merged pairs are recorded as ties; the tied filters (and their
/// batchnorm channels) are kept bitwise identical.
pub fn zip_branches(
    graph: &ModelGraph,
    calibration: &BTreeMap<String, Tensor>,
    cfg: &MergeConfig,
) -> Result<(ModelGraph, MergeReport, Vec<MergePlan>)> {
    graph.validate()?;
    if !graph.ties.is_empty() {
        return Err(MimoError::Usage("graph already has merged neurons".into()));
    }
    let sites = aligned_sites(graph)?;
    if cfg.budgets.len() > 1 && cfg.budgets.len() > sites.len() {
        return Err(MimoError::Config(format!(
            "{} merge budgets given for {} aligned layers",
            cfg.budgets.len(),
            sites.len()
        )));
    }
    let params_before = count_params(graph);
    let mut out = graph.clone();
    let mut layers = Vec::new();
    let mut plans = Vec::new();
    for (l, (sa, sb)) in sites.iter().enumerate() {
        let budget = match cfg.budgets.as_slice() {
            [all] => *all,
            list => list.get(l).copied().unwrap_or(0),
        };
        if budget == 0 {
            continue;
        }
        let pa = float_conv(&out, sa)?;
        let pb = float_conv(&out, sb)?;
        if pa.weight.shape()[1..] != pb.weight.shape()[1..]
            || pa.stride != pb.stride
            || pa.padding != pb.padding
        {
            // pruning left the two layers with different inputs
            layers.push(LayerMergeReport {
                site_a: sa.clone(),
                site_b: sb.clone(),
                merged: 0,
                mean_distance: 0.0,
                max_distance: 0.0,
                param_delta: 0,
                skipped: Some(format!(
                    "filter shapes {:?} vs {:?}",
                    pa.weight.shape(),
                    pb.weight.shape()
                )),
            });
            continue;
        }
        let budget = budget.min(pa.out_channels()).min(pb.out_channels());
        let (bna, bnb) = (out.site_bn(sa), out.site_bn(sb));
        if bna.is_some() != bnb.is_some() {
            return Err(MimoError::graph(
                sb,
                format!("batchnorm presence differs from {sa}"),
            ));
        }
        let (_, caps) = forward_capture(&out, calibration, &[sa.clone(), sb.clone()])?;
        let ha = layer_hessian(&caps[sa], &pa, cfg, 2 * l as u64)?;
        let hb = layer_hessian(&caps[sb], &pb, cfg, 2 * l as u64 + 1)?;
        let rows_a = effective_rows(&pa, bna.as_ref());
        let rows_b = effective_rows(&pb, bnb.as_ref());
        let mut plan = plan_merge(&rows_a, &rows_b, &ha, &hb, budget).map_err(|e| e.at_node(sb))?;
        plan.site_a = sa.clone();
        plan.site_b = sb.clone();
        for pair in &plan.pairs {
            if pair.merged == rows_a[pair.a] {
                // identical function already: share A's raw filter as is
                let k = pa.fan_in();
                let mut raw: Vec<f64> = pa.weight.data()[pair.a * k..(pair.a + 1) * k]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                raw.push(pa.bias.data()[pair.a] as f64);
                write_filter(&mut out, sb, pair.b, &raw, false)?;
            } else {
                write_filter(&mut out, sa, pair.a, &pair.merged, true)?;
                write_filter(&mut out, sb, pair.b, &pair.merged, true)?;
            }
            out.ties.push(Tie {
                site_a: sa.clone(),
                filter_a: pair.a,
                site_b: sb.clone(),
                filter_b: pair.b,
            });
        }
        out.sync_ties()?;
        let n = plan.pairs.len();
        let ds: Vec<f64> = plan.pairs.iter().map(|p| p.distance).collect();
        layers.push(LayerMergeReport {
            site_a: sa.clone(),
            site_b: sb.clone(),
            merged: n,
            mean_distance: if n > 0 {
                ds.iter().sum::<f64>() / n as f64
            } else {
                0.0
            },
            max_distance: ds.iter().copied().fold(0.0, f64::max),
            param_delta: -((n * (pa.fan_in() + 1)) as i64),
            skipped: None,
        });
        plans.push(plan);
    }
    let params_after = count_params(&out);
    Ok((
        out,
        MergeReport {
            layers,
            params_before,
            params_after,
        },
        plans,
    ))
}

/// Sums the gradients of tied filters (and batchnorm channels) and gives
/// both sides the sum, so a shared weight moves as one parameter.
pub(crate) fn tie_gradients(graph: &ModelGraph, grads: &mut Gradients) {
    for tie in &graph.ties {
        let Some(layer) = graph.conv_layer(&tie.site_a) else {
            continue;
        };
        let k = layer.fan_in();
        let mut pairs = vec![
            (
                format!("{}.weight", tie.site_a),
                format!("{}.weight", tie.site_b),
                k,
            ),
            (
                format!("{}.bias", tie.site_a),
                format!("{}.bias", tie.site_b),
                1,
            ),
        ];
        if let (Some(ka), Some(kb)) = (
            graph.site_bn_key(&tie.site_a),
            graph.site_bn_key(&tie.site_b),
        ) {
            pairs.push((format!("{ka}.gamma"), format!("{kb}.gamma"), 1));
            pairs.push((format!("{ka}.beta"), format!("{kb}.beta"), 1));
        }
        for (ka, kb, len) in pairs {
            let (Some(ga), Some(gb)) = (grads.get(&ka), grads.get(&kb)) else {
                continue;
            };
            let ra = tie.filter_a * len..(tie.filter_a + 1) * len;
            let rb = tie.filter_b * len..(tie.filter_b + 1) * len;
            let sum: Vec<f32> = ga.data()[ra.clone()]
                .iter()
                .zip(&gb.data()[rb.clone()])
                .map(|(a, b)| a + b)
                .collect();
            grads.get_mut(&ka).unwrap().data_mut()[ra].copy_from_slice(&sum);
            grads.get_mut(&kb).unwrap().data_mut()[rb].copy_from_slice(&sum);
        }
    }
}
