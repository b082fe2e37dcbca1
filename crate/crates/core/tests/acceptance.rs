//! End-to-end acceptance checks. Everything runs inside one test so the
//! latency measurements do not share the CPU with other test threads.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mimo_core::autodiff::Tape;
use mimo_core::graph::exec::forward_tape;
use mimo_core::graph::{count_params, io, ParamClass, Storage};
use mimo_core::harness::eval::{accuracy, head_subgraph, measure_latency, LatencyOptions};
use mimo_core::harness::train::batch_loss;
use mimo_core::harness::{run_pipeline, PipelineConfig, PipelineOutcome, SyntheticDataset};
use mimo_core::passes::bnfold::fold_graph;
use mimo_core::passes::mtz::{
    neuron_distance, plan_merge, zip_branches, HessianEstimate, MergeConfig,
};
use mimo_core::passes::quant::{quantize_model, Bits, Granularity, QuantParams};
use mimo_core::passes::vib::{
    apply_masks, insert_gates, prune_structural, random_masks_like, GateMode, VibConfig,
};
use mimo_core::{build_preset, forward, ModelGraph, Preset, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
mod reference;
use common::{
    gated, max_output_diff, perturb, random_inputs, random_legal_masks, randomize_gates,
    twin_branches,
};
use reference::Reference;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn bn_fold_equivalence() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f32;
    for seed in 0..20 {
        let mut g = build_preset(Preset::MiniMimo, seed);
        perturb(&mut g, seed);
        let (folded, _) = fold_graph(&g).map_err(|e| e.to_string())?;
        let x = random_inputs(&g, 20, 100 + seed);
        let d = max_output_diff(&forward(&g, &x).unwrap(), &forward(&folded, &x).unwrap());
        worst = worst.max(d);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-5, "max |folded - unfolded| = {worst:e}");
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("max diff {worst:.2e} in {secs:.1} s"))
}

fn prune_equivalence() -> Check {
    let mut worst = 0.0f32;
    let mut check = |g: &ModelGraph, empty: Option<&str>, seed: u64| -> Check {
        let masks = random_legal_masks(g, seed, empty);
        let reference = apply_masks(g, &masks).map_err(|e| e.to_string())?;
        let pruned = prune_structural(g, &masks).map_err(|e| e.to_string())?;
        let x = random_inputs(g, 20, seed);
        let d = max_output_diff(
            &forward(&reference, &x).unwrap(),
            &forward(&pruned, &x).unwrap(),
        );
        worst = worst.max(d);
        ensure!(d <= 1e-5, "diff {d:e} (emptied block {empty:?})");
        Ok(String::new())
    };
    for preset in [
        Preset::MiniMimo,
        Preset::MiniMiso,
        Preset::MiniSiso,
        Preset::PaperMimo,
    ] {
        check(&gated(preset, 1), None, 1).map_err(|e| format!("{preset}: {e}"))?;
    }
    for block in ["image.block1", "image.block2", "audio.block1"] {
        check(&gated(Preset::MiniMimo, 2), Some(block), 2)?;
    }
    Ok(format!(
        "max diff {worst:.2e} over four presets and three bypass blocks"
    ))
}

const GAMMA: f32 = 0.05;
const NOISE_SEED: u64 = 13;
const STEP: f64 = 1e-3;

fn gradient_check() -> Check {
    let start = Instant::now();
    let mut g = build_preset(Preset::MiniMimo, 21);
    perturb(&mut g, 21);
    let mut g = insert_gates(&g, &VibConfig::with_gate_count(1)).unwrap();
    randomize_gates(&mut g, 21);
    let data = SyntheticDataset::generate(21, 64).unwrap();
    let idx = [0usize, 1, 2, 3];
    let inputs = data.batch_inputs(&idx).unwrap();
    let labels: BTreeMap<String, Vec<usize>> = g
        .outputs
        .iter()
        .map(|o| {
            let all = data.labels(&o.name).unwrap();
            (o.name.clone(), idx.iter().map(|&i| all[i]).collect())
        })
        .collect();

    let mut tape = Tape::new(GateMode::Train { seed: NOISE_SEED });
    let loss = batch_loss(&g, &mut tape, &data, &idx, Some(GAMMA)).unwrap();
    let logits = forward_tape(&g, &mut tape, &inputs).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut reference = Reference::new(&g, NOISE_SEED);
    let base = reference.eval(&inputs, &labels, GAMMA as f64);
    // the oracle must see the same function the tape differentiates
    for (head, var) in &logits {
        let ours = tape.value(*var);
        for (a, b) in ours.data().iter().zip(&base.logits[head]) {
            ensure!(
                (*a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()),
                "reference logits for {head} disagree: {a} vs {b}"
            );
        }
    }

    let mut classes = BTreeMap::new();
    g.visit(&mut |k, c, s| {
        if let (true, Storage::F32(_)) = (c.learnable(), s) {
            classes.insert(k.to_string(), c);
        }
    });
    let mut checked: BTreeMap<ParamClass, usize> = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut kinked = 0;
    for (key, class) in &classes {
        let grad = grads
            .get(key)
            .ok_or_else(|| format!("no gradient for {key}"))?;
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
        let mut done = 0;
        for &i in order.iter().take(8) {
            if done == 2 {
                break;
            }
            let old = reference.params[key][i];
            reference.params.get_mut(key).unwrap()[i] = old + STEP;
            let plus = reference.eval(&inputs, &labels, GAMMA as f64);
            reference.params.get_mut(key).unwrap()[i] = old - STEP;
            let minus = reference.eval(&inputs, &labels, GAMMA as f64);
            reference.params.get_mut(key).unwrap()[i] = old;
            // the loss is only smooth across the step if no ReLU input
            // changes sign inside it
            if plus.signs != base.signs || minus.signs != base.signs {
                kinked += 1;
                continue;
            }
            let fd = (plus.loss - minus.loss) / (2.0 * STEP);
            let an = grad.data()[i] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(rel);
            ensure!(
                rel <= 1e-3,
                "{key}[{i}]: analytic {an:.6e}, finite difference {fd:.6e}"
            );
            *checked.entry(*class).or_default() += 1;
            done += 1;
        }
    }
    let want = [
        ParamClass::ConvWeight,
        ParamClass::ConvBias,
        ParamClass::BnGamma,
        ParamClass::BnBeta,
        ParamClass::LinearWeight,
        ParamClass::LinearBias,
        ParamClass::GateMu,
        ParamClass::GateLogSigma2,
    ];
    for c in want {
        ensure!(checked.contains_key(&c), "class {c:?} not covered");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.1} s");
    Ok(format!(
        "{} entries over {} classes ({kinked} skipped across a ReLU kink), worst relative error {worst:.2e}, {secs:.1} s",
        checked.values().sum::<usize>(),
        checked.len()
    ))
}

fn greedy_oracle(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    ha: &HessianEstimate,
    hb: &HessianEstimate,
    budget: usize,
) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (i, wa) in a.iter().enumerate() {
        for (j, wb) in b.iter().enumerate() {
            let sum = &ha.matrix + &hb.matrix;
            let rhs = &ha.matrix * DVector::from_column_slice(wa)
                + &hb.matrix * DVector::from_column_slice(wb);
            let w = sum.lu().solve(&rhs).unwrap();
            let da = &w - DVector::from_column_slice(wa);
            let db = &w - DVector::from_column_slice(wb);
            let obj = 0.5 * da.dot(&(&ha.matrix * &da)) + 0.5 * db.dot(&(&hb.matrix * &db));
            all.push((obj, i, j));
        }
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (_, i, j) in all {
        if out.len() < budget && out.iter().all(|&(p, q)| p != i && q != j) {
            out.push((i, j));
        }
    }
    out
}

fn mtz_oracles() -> Check {
    let id = HessianEstimate::identity(2);
    let cases = [
        (vec![1.0, 2.0], vec![1.0, 2.0], 1.0, 0.0),
        (vec![1.0, 0.0], vec![0.0, 1.0], 1.0, 0.5),
        (vec![1.0, 0.0], vec![0.0, 1.0], 2.0, 1.0),
    ];
    for (wa, wb, c, want) in cases {
        let h = id.scaled(c);
        let d = neuron_distance(&wa, &wb, &h, &h).unwrap();
        ensure!((d - want).abs() <= 1e-9, "distance {d} instead of {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut plans = 0;
    for width in [2usize, 3] {
        for _ in 0..50 {
            let f = 2;
            let mut layer = || -> Vec<Vec<f64>> {
                (0..width)
                    .map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let (a, b) = (layer(), layer());
            let mut spd = || {
                let m = DMatrix::from_fn(f, f, |_, _| rng.random_range(-1.0..1.0));
                HessianEstimate::from_matrix(&m * m.transpose() + DMatrix::identity(f, f) * 0.1)
                    .unwrap()
            };
            let (ha, hb) = (spd(), spd());
            for budget in 0..=width {
                let plan = plan_merge(&a, &b, &ha, &hb, budget).unwrap();
                let got: Vec<(usize, usize)> = plan.pairs.iter().map(|p| (p.a, p.b)).collect();
                ensure!(
                    got == greedy_oracle(&a, &b, &ha, &hb, budget),
                    "plan {got:?} differs from enumeration"
                );
                plans += 1;
            }
        }
    }
    let g = twin_branches(5);
    let (merged, _, _) =
        zip_branches(&g, &random_inputs(&g, 16, 5), &MergeConfig::new(vec![3], 0)).unwrap();
    ensure!(!merged.ties.is_empty(), "nothing merged");
    let x = random_inputs(&g, 20, 6);
    let (a, b) = (forward(&g, &x).unwrap(), forward(&merged, &x).unwrap());
    ensure!(
        a.iter().all(|(k, v)| v.bit_eq(&b[k])),
        "duplicated-branch merge changed outputs"
    );
    Ok(format!(
        "3 distance values, {plans} plans, {} ties bit-exact",
        merged.ties.len()
    ))
}

fn quant_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = if i % 10 == 0 {
            1
        } else {
            rng.random_range(1..300)
        };
        let values: Vec<f32> = match i % 4 {
            0 => (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            1 => (0..n).map(|_| rng.random_range(-5.0..-0.1)).collect(),
            2 => vec![rng.random_range(-2.0..2.0); n],
            _ => (0..n).map(|_| rng.random_range(-1e-3..1e-3)).collect(),
        };
        for bits in [Bits::Int8, Bits::Int4] {
            let p = QuantParams::for_values(&values, bits);
            for &v in &values {
                let err = (p.dequantize(p.quantize(v)).unwrap() as f64 - v as f64).abs();
                worst = worst.max(err - p.step() / 2.0);
                ensure!(
                    err <= p.step() / 2.0 + 1e-7,
                    "{bits:?}: {v} off by {err:e}, step {}",
                    p.step()
                );
            }
        }
    }
    for (bits, lo, hi) in [(Bits::Int8, -128, 127), (Bits::Int4, -8, 7)] {
        let p = QuantParams::for_values(&[-1.5, 0.2, 2.5], bits);
        ensure!(
            p.quantize(-1.5) == lo && p.quantize(2.5) == hi,
            "{bits:?} endpoint codes"
        );
    }
    Ok(format!(
        "2000 tensor quantizations, worst excess over half a step {worst:.1e}"
    ))
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mini-mimo.toml")
}

fn row_acc(out: &PipelineOutcome, stage: &str) -> (f64, f64) {
    let r = out.rows.iter().find(|r| r.stage == stage).unwrap();
    (r.acc_task1.unwrap(), r.acc_task2.unwrap())
}

fn compression_experiment(out: &PipelineOutcome, dir: &Path, secs: f64) -> Check {
    let cfg = PipelineConfig::load(config_path()).unwrap();
    let (_, test) = cfg.datasets().unwrap();
    let mut lines = Vec::new();
    let pruned = out.mask_report.as_ref().unwrap().pruned_fraction();
    let base = row_acc(out, "train");
    let vib = row_acc(out, "vib-prune");
    lines.push(format!("pruned {:.1}% of gated channels", 100.0 * pruned));
    ensure!(pruned >= 0.6, "only {:.1}% pruned", 100.0 * pruned);
    ensure!(
        base.0 - vib.0 <= 2.0 && base.1 - vib.1 <= 2.0,
        "pruning cost {base:?} -> {vib:?}"
    );

    // random masks with the same per-layer counts on the trained model
    let baseline = out.baseline.as_ref().unwrap();
    let unit = insert_gates(baseline, &VibConfig::with_gate_count(1)).unwrap();
    let random = random_masks_like(out.masks.as_ref().unwrap(), cfg.seed);
    let acc = accuracy(&apply_masks(&unit, &random).unwrap(), &test).unwrap();
    let rand_acc = (acc["task1"], acc["task2"]);
    lines.push(format!("vib {vib:?} vs random {rand_acc:?}"));
    ensure!(
        vib.0 - rand_acc.0 >= 10.0 && vib.1 - rand_acc.1 >= 10.0,
        "vib {vib:?} vs random {rand_acc:?}"
    );

    let params = |s: &str| out.rows.iter().find(|r| r.stage == s).unwrap().params;
    lines.push(format!(
        "params {} -> {}",
        params("fine-tune"),
        params("merge")
    ));
    ensure!(
        params("merge") < params("fine-tune"),
        "merging did not reduce parameters"
    );

    let float = row_acc(out, "fold-bn");
    let int8 = row_acc(out, "quantize");
    let folded = io::load(dir.join("05-fold-bn.mimo")).unwrap();
    let q4 = quantize_model(
        &folded,
        Bits::Int4,
        cfg.quantize.granularity.parse::<Granularity>().unwrap(),
    )
    .unwrap();
    let a4 = accuracy(&q4, &test).unwrap();
    let int4 = (a4["task1"], a4["task2"]);
    lines.push(format!("float {float:?} int8 {int8:?} int4 {int4:?}"));
    ensure!(
        (float.0 - int8.0).abs() <= 1.0 && (float.1 - int8.1).abs() <= 1.0,
        "int8 drifted"
    );
    ensure!(
        float.0 - int4.0 <= 5.0 && float.1 - int4.1 <= 5.0,
        "int4 lost more than 5 points"
    );
    lines.push(format!("{secs:.0} s"));
    ensure!(secs <= 1800.0, "took {secs:.0} s");
    Ok(lines.join("; "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn single_pass_efficiency() -> Check {
    let g = build_preset(Preset::MiniMimo, 7);
    let x = random_inputs(&g, 1, 7);
    let heads: Vec<ModelGraph> = g
        .outputs
        .iter()
        .map(|o| head_subgraph(&g, &o.name).unwrap())
        .collect();
    let head_inputs: Vec<BTreeMap<String, Tensor>> = heads
        .iter()
        .map(|h| {
            x.iter()
                .filter(|(k, _)| h.input(k).is_some())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        })
        .collect();
    let opts = LatencyOptions {
        warmup: 20,
        passes: 200,
    };
    let (mut whole, mut single, mut sum) = (Vec::new(), Vec::new(), Vec::new());
    // interleaved rounds so drift hits every variant alike
    for _ in 0..7 {
        whole.push(measure_latency(&g, &x, opts).unwrap().median_of_means_ms);
        let parts: Vec<f64> = heads
            .iter()
            .zip(&head_inputs)
            .map(|(h, hx)| measure_latency(h, hx, opts).unwrap().median_of_means_ms)
            .collect();
        single.push(parts.iter().copied().fold(0.0, f64::max));
        sum.push(parts.iter().sum());
    }
    let (whole, single, sum) = (median(whole), median(single), median(sum));
    ensure!(
        whole < 2.0 * single,
        "two-head pass {whole:.3} ms vs single head {single:.3} ms"
    );
    ensure!(
        whole < sum,
        "two-head pass {whole:.3} ms vs separate heads {sum:.3} ms"
    );
    let p = count_params(&build_preset(Preset::PaperMimo, 0)) as f64;
    ensure!(
        (p - 25.51e6).abs() <= 0.1 * 25.51e6,
        "paper-mimo has {p} parameters"
    );
    Ok(format!(
        "two heads {whole:.3} ms, slowest single head {single:.3} ms, separate total {sum:.3} ms; paper-mimo {:.2}M params",
        p / 1e6
    ))
}

fn stage_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "mimo" || x == "json") && !p.ends_with("report.json")
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism(first: &PipelineOutcome, first_dir: &Path) -> Check {
    let cfg = PipelineConfig::load(config_path()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let second = run_pipeline(&cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    let accs = |o: &PipelineOutcome| -> Vec<(u64, u64)> {
        o.rows
            .iter()
            .map(|r| {
                (
                    r.acc_task1.unwrap().to_bits(),
                    r.acc_task2.unwrap().to_bits(),
                )
            })
            .collect()
    };
    ensure!(accs(first) == accs(&second), "accuracies differ");
    ensure!(first.masks == second.masks, "masks differ");
    ensure!(
        first.merge_plans == second.merge_plans,
        "merge plans differ"
    );
    let (a, b) = (stage_files(first_dir), stage_files(dir.path()));
    ensure!(a.len() >= 8, "only {} files written", a.len());
    for (name, bytes) in &a {
        ensure!(b.get(name) == Some(bytes), "{name} differs");
    }
    Ok(format!("{} files bit-identical", a.len()))
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        results.push((name, r));
    };
    run("1 bn-fold equivalence", &mut bn_fold_equivalence);
    run("2 prune equivalence", &mut prune_equivalence);
    run("3 gradient check", &mut gradient_check);
    run("4 mtz oracles", &mut mtz_oracles);
    run("5 quantization bounds", &mut quant_bounds);
    run("7 single-pass efficiency", &mut single_pass_efficiency);

    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let cfg = PipelineConfig::load(config_path()).unwrap();
    let outcome = run_pipeline(&cfg, Some(dir.path()));
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(out) => {
            run("6 compression experiment", &mut || {
                compression_experiment(out, dir.path(), secs)
            });
            run("8 determinism", &mut || determinism(out, dir.path()));
        }
        Err(e) => {
            let msg = format!("pipeline failed: {e}");
            run("6 compression experiment", &mut || Err(msg.clone()));
            run("8 determinism", &mut || Err(msg.clone()));
        }
    }
    results.sort_by_key(|(n, _)| *n);
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => println!("FAIL {name}: {d}"),
        }
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
