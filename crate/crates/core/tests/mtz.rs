use mimo_core::graph::count_params;
use mimo_core::passes::mtz::*;
use mimo_core::{build_preset, forward, Preset, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

mod common;
use common::{perturb, random_inputs, twin_branches};

fn spd(n: usize, entries: &[f64]) -> HessianEstimate {
    let a = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
    HessianEstimate::from_matrix(&a * a.transpose() + DMatrix::identity(n, n) * 0.1).unwrap()
}

/// Minimizer of the pairwise objective by direct LU solve.
fn oracle_merged(wa: &[f64], wb: &[f64], ha: &HessianEstimate, hb: &HessianEstimate) -> Vec<f64> {
    let sum = &ha.matrix + &hb.matrix;
    let rhs =
        &ha.matrix * DVector::from_column_slice(wa) + &hb.matrix * DVector::from_column_slice(wb);
    sum.lu().solve(&rhs).unwrap().iter().copied().collect()
}

fn case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..5).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-1.0f64..1.0, n * n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_nonnegative_and_symmetric((n, wa, wb, ea, eb) in case()) {
        let (ha, hb) = (spd(n, &ea), spd(n, &eb));
        let d = neuron_distance(&wa, &wb, &ha, &hb).unwrap();
        let back = neuron_distance(&wb, &wa, &hb, &ha).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - back).abs() <= 1e-9 * (1.0 + d));
        prop_assert_eq!(neuron_distance(&wa, &wa, &ha, &hb).unwrap(), 0.0);
    }

    #[test]
    fn scaling_both_hessians_scales_distance_only(
        (n, wa, wb, ea, eb) in case(),
        c in 0.1f64..10.0,
    ) {
        let (ha, hb) = (spd(n, &ea), spd(n, &eb));
        let d = neuron_distance(&wa, &wb, &ha, &hb).unwrap();
        let dc = neuron_distance(&wa, &wb, &ha.scaled(c), &hb.scaled(c)).unwrap();
        prop_assert!((dc - c * d).abs() <= 1e-8 * (1.0 + c * d));
        let w = merged_weight(&wa, &wb, &ha, &hb).unwrap();
        let wc = merged_weight(&wa, &wb, &ha.scaled(c), &hb.scaled(c)).unwrap();
        for (x, y) in w.iter().zip(&wc) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn merged_weight_minimizes_objective(
        (n, wa, wb, ea, eb) in case(),
        nudge in prop::collection::vec(-0.1f64..0.1, 4),
    ) {
        let (ha, hb) = (spd(n, &ea), spd(n, &eb));
        let w = merged_weight(&wa, &wb, &ha, &hb).unwrap();
        let want = oracle_merged(&wa, &wb, &ha, &hb);
        for (x, y) in w.iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
        let best = merge_objective(&w, &wa, &wb, &ha, &hb);
        let d = neuron_distance(&wa, &wb, &ha, &hb).unwrap();
        prop_assert!((best - d).abs() <= 1e-9 * (1.0 + d));
        let moved: Vec<f64> = w.iter().zip(nudge.iter().cycle()).map(|(a, b)| a + b).collect();
        prop_assert!(merge_objective(&moved, &wa, &wb, &ha, &hb) >= best - 1e-12);
    }
}

/// Greedy matching from the objective alone, independent of the metric.
fn brute_plan(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    ha: &HessianEstimate,
    hb: &HessianEstimate,
    budget: usize,
) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (i, wa) in a.iter().enumerate() {
        for (j, wb) in b.iter().enumerate() {
            let w = oracle_merged(wa, wb, ha, hb);
            all.push((merge_objective(&w, wa, wb, ha, hb), i, j));
        }
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (_, i, j) in all {
        if out.len() == budget {
            break;
        }
        if out.iter().all(|&(p, q)| p != i && q != j) {
            out.push((i, j));
        }
    }
    out
}

#[test]
fn plan_matches_brute_force_on_small_layers() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for width in [2usize, 3] {
        for _ in 0..25 {
            let f = 3;
            let mut layer = || -> Vec<Vec<f64>> {
                (0..width)
                    .map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let (a, b) = (layer(), layer());
            let e: Vec<f64> = (0..2 * f * f)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let (ha, hb) = (spd(f, &e[..f * f]), spd(f, &e[f * f..]));
            for budget in 0..=width {
                let plan = plan_merge(&a, &b, &ha, &hb, budget).unwrap();
                let got: Vec<(usize, usize)> = plan.pairs.iter().map(|p| (p.a, p.b)).collect();
                assert_eq!(got, brute_plan(&a, &b, &ha, &hb, budget));
                assert!(plan
                    .pairs
                    .windows(2)
                    .all(|w| w[0].distance <= w[1].distance));
            }
            assert!(plan_merge(&a, &b, &ha, &hb, width + 1).is_err());
        }
    }
}

#[test]
fn hessian_from_activations() {
    let xs = [Tensor::vector(&[1.0, 0.0]), Tensor::vector(&[0.0, 2.0])];
    let h = estimate_hessian(&xs, Damping::Absolute(0.25)).unwrap();
    assert_eq!(h.sample_count, 2);
    assert!((h.matrix[(0, 0)] - 0.75).abs() < 1e-12);
    assert!((h.matrix[(1, 1)] - 2.25).abs() < 1e-12);
    assert!(h.matrix[(0, 1)].abs() < 1e-12);
    assert!(h.is_symmetric(0.0));
    let rel = estimate_hessian(&xs, Damping::RelativeTrace(0.1)).unwrap();
    // trace of the undamped moment is 2.5 over 2 features
    assert!((rel.damping - 0.125).abs() < 1e-12);
}

#[test]
fn identical_branches_merge_without_changing_outputs() {
    let g = twin_branches(3);
    let calib = random_inputs(&g, 16, 1);
    let (merged, report, plans) = zip_branches(&g, &calib, &MergeConfig::new(vec![3], 0)).unwrap();
    assert!(!merged.ties.is_empty());
    assert!(report
        .layers
        .iter()
        .all(|l| l.skipped.is_none() && l.merged == 3));
    for plan in &plans {
        assert!(plan.pairs.iter().all(|p| p.distance == 0.0 && p.a == p.b));
    }
    let x = random_inputs(&g, 8, 2);
    let (a, b) = (forward(&g, &x).unwrap(), forward(&merged, &x).unwrap());
    for (k, v) in &a {
        assert!(v.bit_eq(&b[k]), "{k}");
    }
}

#[test]
fn zero_budget_is_identity() {
    let g = build_preset(Preset::MiniMimo, 5);
    let calib = random_inputs(&g, 8, 5);
    for budgets in [vec![0], vec![]] {
        let (merged, report, plans) =
            zip_branches(&g, &calib, &MergeConfig::new(budgets, 0)).unwrap();
        assert_eq!(merged, g);
        assert!(plans.is_empty());
        assert_eq!(report.params_before, report.params_after);
    }
}

#[test]
fn parameter_drop_is_one_filter_per_merge() {
    let mut g = build_preset(Preset::MiniMimo, 6);
    perturb(&mut g, 6);
    let calib = random_inputs(&g, 16, 6);
    let budgets = vec![1, 2, 0, 3, 1, 2];
    let sites = aligned_sites(&g).unwrap();
    assert_eq!(sites.len(), budgets.len());
    let (merged, report, _) =
        zip_branches(&g, &calib, &MergeConfig::new(budgets.clone(), 0)).unwrap();
    let want: usize = sites
        .iter()
        .zip(&budgets)
        .map(|((a, _), &k)| {
            let w = g.conv_layer(a).unwrap().float_params().unwrap().weight;
            k * (w.shape()[1..].iter().product::<usize>() + 1)
        })
        .sum();
    assert_eq!(count_params(&g) - count_params(&merged), want);
    assert_eq!(report.params_before - report.params_after, want);
    assert_eq!(merged.ties.len(), budgets.iter().sum::<usize>());
}

#[test]
fn tied_filters_stay_identical() {
    let mut g = build_preset(Preset::MiniMimo, 8);
    perturb(&mut g, 8);
    let calib = random_inputs(&g, 16, 8);
    let (merged, _, _) = zip_branches(&g, &calib, &MergeConfig::new(vec![2], 0)).unwrap();
    for t in &merged.ties {
        let a = merged
            .conv_layer(&t.site_a)
            .unwrap()
            .float_params()
            .unwrap();
        let b = merged
            .conv_layer(&t.site_b)
            .unwrap()
            .float_params()
            .unwrap();
        let k = a.fan_in();
        assert_eq!(
            a.weight.data()[t.filter_a * k..(t.filter_a + 1) * k],
            b.weight.data()[t.filter_b * k..(t.filter_b + 1) * k]
        );
        assert_eq!(a.bias.data()[t.filter_a], b.bias.data()[t.filter_b]);
    }
    assert!(zip_branches(&merged, &calib, &MergeConfig::new(vec![1], 0)).is_err());
}

#[test]
fn single_branch_model_has_nothing_to_merge() {
    let g = build_preset(Preset::MiniSiso, 0);
    assert!(aligned_sites(&g).map(|s| s.is_empty()).unwrap_or(true));
}
