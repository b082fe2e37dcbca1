#![allow(dead_code)]

use std::collections::BTreeMap;

use mimo_core::graph::{ParamClass, Storage, StorageMut};
use mimo_core::passes::vib::{gate_sites, insert_gates, KeptChannels, MaskSet, VibConfig};
use mimo_core::{build_preset, ModelGraph, Preset, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_inputs(graph: &ModelGraph, batch: usize, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .inputs
        .iter()
        .map(|d| {
            let mut shape = vec![batch];
            shape.extend(&d.shape);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            (d.name.clone(), Tensor::from_vec(shape, data).unwrap())
        })
        .collect()
}

/// Gives every batchnorm non-trivial statistics and affine terms, and every
/// bias a non-zero value, so folding and pruning have something to do.
pub fn perturb(graph: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph.visit_mut(&mut |_, class, storage| {
        let StorageMut::F32(t) = storage else { return };
        for v in t.data_mut() {
            *v = match class {
                ParamClass::BnGamma => rng.random_range(0.5..1.5),
                ParamClass::BnBeta | ParamClass::BnMean => rng.random_range(-0.3..0.3),
                ParamClass::BnVar => rng.random_range(0.5..2.0),
                ParamClass::ConvBias | ParamClass::LinearBias => rng.random_range(-0.1..0.1),
                _ => *v,
            };
        }
    });
}

pub fn max_output_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .map(|(k, v)| v.max_abs_diff(&b[k]).unwrap())
        .fold(0.0, f32::max)
}

/// Gates with random means in `[-1.5, 1.5]` and random log variances.
pub fn randomize_gates(graph: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph.visit_mut(&mut |_, class, storage| {
        let StorageMut::F32(t) = storage else { return };
        for v in t.data_mut() {
            match class {
                ParamClass::GateMu => *v = rng.random_range(-1.5..1.5),
                ParamClass::GateLogSigma2 => *v = rng.random_range(-3.0..1.0),
                _ => {}
            }
        }
    });
}

pub fn gated(preset: Preset, seed: u64) -> ModelGraph {
    let mut g = build_preset(preset, seed);
    perturb(&mut g, seed);
    let mut g = insert_gates(&g, &VibConfig::with_gate_count(1)).unwrap();
    randomize_gates(&mut g, seed);
    g
}

/// Keeps each channel with probability one half, patching layers that
/// may not be emptied.
pub fn random_legal_masks(graph: &ModelGraph, seed: u64, empty_block: Option<&str>) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = MaskSet::new();
    for s in gate_sites(graph) {
        let c = s.gate.channels();
        let mut kept: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.5)).collect();
        let in_block = s.site.ends_with(".gate1") || s.site.ends_with(".gate2");
        let emptied = empty_block.is_some_and(|b| s.site.starts_with(&format!("{b}.")));
        if emptied {
            kept.clear();
        } else if kept.is_empty() || (!in_block && kept.len() == c && c > 1) {
            kept = vec![rng.random_range(0..c)];
        }
        masks.insert(s.site, KeptChannels::new(c, kept).unwrap());
    }
    masks
}

/// Mini-mimo whose audio branch carries the image branch's parameters.
pub fn twin_branches(seed: u64) -> ModelGraph {
    let mut g = build_preset(Preset::MiniMimo, seed);
    perturb(&mut g, seed);
    let mut image = BTreeMap::new();
    g.visit(&mut |key, _, s| {
        if let (Some(rest), Storage::F32(t)) = (key.strip_prefix("image."), s) {
            image.insert(rest.to_string(), t.clone());
        }
    });
    g.visit_mut(&mut |key, _, s| {
        if let (Some(rest), StorageMut::F32(t)) = (key.strip_prefix("audio."), s) {
            *t = image[rest].clone();
        }
    });
    g
}
