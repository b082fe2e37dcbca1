use mimo_core::graph::{count_params, io};
use mimo_core::harness::data::{features, task2_rule, Feature};
use mimo_core::harness::eval::{accuracy, LatencyOptions};
use mimo_core::harness::report::{parse_json, render_json};
use mimo_core::harness::*;
use mimo_core::{build_preset, MimoError, Preset};

fn small_config(stages: &str) -> PipelineConfig {
    let text = format!(
        r#"
preset = "mini-mimo"
seed = 3
stages = [{stages}]
[data]
n = 160
seed = 3
[train]
epochs = 2
[vib]
epochs = 1
gamma_reg = 0.03
[fine_tune]
epochs = 1
[merge]
calib = 32
fine_tune_epochs = 1
[eval]
latency_passes = 3
warmup = 1
"#
    );
    PipelineConfig::from_toml(&text).unwrap()
}

#[test]
fn audio_mean_rule_explains_task2() {
    let data = SyntheticDataset::generate(7, 1000).unwrap();
    let agree = task2_rule(&data)
        .iter()
        .zip(&data.task2)
        .filter(|(a, b)| a == b)
        .count();
    assert!(agree as f64 / 1000.0 >= 0.95, "{agree}");
}

/// Best accuracy of a one-threshold split on a single feature, each side
/// predicting its majority class.
fn best_threshold_accuracy(values: &[f32], labels: &[usize]) -> f64 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let mut best = 0;
    for t in sorted.iter().step_by(5) {
        let mut counts = [[0usize; 4]; 2];
        for (v, &l) in values.iter().zip(labels) {
            counts[(*v > *t) as usize][l] += 1;
        }
        let hit: usize = counts.iter().map(|c| *c.iter().max().unwrap()).sum();
        best = best.max(hit);
    }
    best as f64 / labels.len() as f64
}

#[test]
fn task1_needs_both_modalities() {
    let data = SyntheticDataset::generate(11, 1000).unwrap();
    for maps in [&data.image, &data.audio] {
        for f in Feature::ALL {
            let acc = best_threshold_accuracy(&features(maps, f), &data.task1);
            assert!(acc <= 0.6, "{f:?}: {acc}");
        }
    }
}

#[test]
fn labels_are_balanced_and_seeded() {
    let data = SyntheticDataset::generate(2, 400).unwrap();
    for c in 0..4 {
        assert_eq!(data.task1.iter().filter(|&&l| l == c).count(), 100);
    }
    let ones = data.task2.iter().filter(|&&l| l == 1).count();
    assert!((150..=250).contains(&ones), "{ones}");
    assert_eq!(data, SyntheticDataset::generate(2, 400).unwrap());
    assert_ne!(data, SyntheticDataset::generate(3, 400).unwrap());
    let (train, test) = data.split(2, 0.2).unwrap();
    assert_eq!((train.len(), test.len()), (320, 80));
    assert!(SyntheticDataset::generate(0, 4).is_err());
}

#[test]
fn training_lowers_the_loss() {
    let data = SyntheticDataset::generate(5, 320).unwrap();
    let g = build_preset(Preset::MiniMimo, 5);
    let opts = TrainOptions {
        epochs: 20,
        seed: 5,
        ..TrainOptions::default()
    };
    let (trained, report) = train(&g, &data, &opts).unwrap();
    assert_eq!(report.epoch_losses.len(), 20);
    assert!(
        report.final_loss() < 0.5 * report.initial_loss,
        "{report:?}"
    );
    let acc = accuracy(&trained, &data).unwrap();
    assert!(acc["task1"] > 90.0, "{acc:?}");
}

#[test]
fn training_is_reproducible() {
    let data = SyntheticDataset::generate(1, 96).unwrap();
    let g = build_preset(Preset::MiniMimo, 1);
    let opts = TrainOptions {
        epochs: 2,
        seed: 9,
        ..TrainOptions::default()
    };
    let (a, ra) = train(&g, &data, &opts).unwrap();
    let (b, rb) = train(&g, &data, &opts).unwrap();
    assert_eq!(io::to_bytes(&a).unwrap(), io::to_bytes(&b).unwrap());
    assert_eq!(ra, rb);
}

#[test]
fn constant_labels_are_fully_predicted() {
    let mut data = SyntheticDataset::generate(4, 64).unwrap();
    data.task1 = vec![2; 64];
    data.task2 = vec![0; 64];
    let g = build_preset(Preset::MiniMimo, 4);
    let opts = TrainOptions {
        epochs: 5,
        seed: 4,
        ..TrainOptions::default()
    };
    let (trained, _) = train(&g, &data, &opts).unwrap();
    let acc = accuracy(&trained, &data).unwrap();
    assert_eq!(acc["task1"], 100.0);
    assert_eq!(acc["task2"], 100.0);
}

#[test]
fn one_row_per_stage() {
    let out = run_pipeline(&small_config(r#""train", "evaluate""#), None).unwrap();
    let stages: Vec<&str> = out.rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["train", "evaluate"]);
    assert_eq!(out.rows[0].acc_task1, out.rows[1].acc_task1);
    let json = render_json(&out.rows).unwrap();
    assert_eq!(parse_json(&json).unwrap(), out.rows);
}

#[test]
fn saved_stage_models_reproduce_their_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(r#""train", "fold-bn", "quantize""#);
    let out = run_pipeline(&cfg, Some(dir.path())).unwrap();
    assert_eq!(out.files.len(), 3);
    let (_, test) = cfg.datasets().unwrap();
    for (row, path) in out.rows.iter().zip(&out.files) {
        let g = io::load(path).unwrap();
        let again = evaluate(
            &g,
            &test,
            &row.stage,
            LatencyOptions {
                warmup: 0,
                passes: 1,
            },
        )
        .unwrap();
        assert_eq!(
            again.acc_task1.map(f64::to_bits),
            row.acc_task1.map(f64::to_bits)
        );
        assert_eq!(
            again.acc_task2.map(f64::to_bits),
            row.acc_task2.map(f64::to_bits)
        );
        assert_eq!(again.params, row.params);
    }
    assert!(dir.path().join("report.txt").exists());

    // a later run can pick up from a saved stage
    let mut resume = small_config(r#""evaluate""#);
    resume.init_model = Some(out.files[1].clone());
    let rerun = run_pipeline(&resume, None).unwrap();
    assert_eq!(rerun.rows[0].acc_task1, out.rows[1].acc_task1);
}

#[test]
fn failing_stage_keeps_last_good_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(r#""train", "vib-prune""#);
    cfg.vib.tau = 1e12;
    let err = run_pipeline(&cfg, Some(dir.path())).unwrap_err();
    assert!(err.to_string().contains("vib-prune"), "{err}");
    let saved = io::load(dir.path().join("last-good.mimo")).unwrap();
    assert_eq!(saved, io::load(dir.path().join("01-train.mimo")).unwrap());
}

#[test]
fn params_never_grow_along_the_pipeline() {
    let cfg = small_config(
        r#""train", "vib-prune", "fine-tune", "merge", "fold-bn", "quantize", "evaluate""#,
    );
    let out = run_pipeline(&cfg, None).unwrap();
    assert_eq!(out.rows.len(), 7);
    let params: Vec<usize> = out.rows.iter().map(|r| r.params).collect();
    assert!(params.windows(2).all(|w| w[1] <= w[0]), "{params:?}");
    assert_eq!(params[6], count_params(&out.graph));
    let bytes: Vec<usize> = out.rows.iter().map(|r| r.weight_bytes).collect();
    assert!(bytes[5] < bytes[4]);
}

#[test]
fn bad_configs_are_rejected() {
    let bad = [
        r#"stages = ["merge", "train"]"#,
        r#"preset = "huge""#,
        "[quantize]\nbits = 6",
        "[quantize]\ngranularity = \"row\"",
        "typo = 1",
    ];
    for text in bad {
        assert!(
            matches!(PipelineConfig::from_toml(text), Err(MimoError::Config(_))),
            "{text}"
        );
    }
    let round = PipelineConfig::from_toml(&PipelineConfig::default().to_toml().unwrap()).unwrap();
    assert_eq!(round, PipelineConfig::default());
}
