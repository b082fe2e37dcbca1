//! `mimoc`: trains, compresses and measures MIMO models stored as `.mimo`
//! files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimo_core::graph::io;
use mimo_core::harness::eval::{accuracy, head_subgraph, measure_latency, LatencyOptions};
use mimo_core::harness::report::{render_json, render_table};
use mimo_core::harness::{evaluate, run_pipeline, train, PipelineConfig};
use mimo_core::passes::bnfold::fold_graph;
use mimo_core::passes::mtz::{parse_budgets, zip_branches, Damping, MergeConfig};
use mimo_core::passes::quant::{quantize_model, Bits, Granularity};
use mimo_core::passes::vib::{
    self, compute_masks, insert_gates, prune_structural, MaskReport, VibConfig,
};
use mimo_core::{build_preset, MimoError, ModelGraph, Preset, Result, Tensor};

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 I/O or corrupt data, 2 configuration or usage error, 3 numerical failure.
Run `mimoc pipeline --print-default` for the default configuration file.";

#[derive(Parser)]
#[command(name = "mimoc", version, about = "Compress multi-input multi-output networks", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Input model (`.mimo`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output path: a `.mimo` file, or a directory for `pipeline`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialisation, training and sampling [default: from config, 7].
    #[arg(long)]
    seed: Option<u64>,
    /// Pipeline config (TOML); supplies dataset and training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset or an existing model on the synthetic dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Preset to build when no --model is given: mini-mimo, mini-miso, mini-siso, paper-mimo.
        #[arg(long, default_value = "mini-mimo")]
        preset: String,
        /// Insert gates and train with the information-bottleneck regularizer.
        #[arg(long)]
        vib: bool,
        /// Regularizer weight for --vib [default: 1e-3 / number of gate layers].
        #[arg(long)]
        gamma: Option<f32>,
        /// Epochs [default: 30, or train.epochs from the config].
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate [default: 0.01, or train.lr from the config].
        #[arg(long)]
        lr: Option<f32>,
        /// Dataset size before the 80/20 split [default: 1000].
        #[arg(long)]
        n: Option<usize>,
    },
    /// Remove channels whose gate signal-to-noise ratio is at most tau.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-2)]
        tau: f64,
    },
    /// Fold batchnorm layers into the preceding convolutions.
    FoldBn {
        #[command(flatten)]
        common: Common,
    },
    /// Merge similar neurons across the two input branches.
    Merge {
        #[command(flatten)]
        common: Common,
        /// Merges per aligned layer pair: one value for all, or a comma list.
        #[arg(long, default_value = "2")]
        budget: String,
        /// Calibration samples drawn from the training split.
        #[arg(long, default_value_t = 256)]
        calib: usize,
        /// Relative Hessian damping c in lambda = c * trace / fan_in.
        #[arg(long, default_value_t = 1e-3)]
        damping: f64,
    },
    /// Post-training quantization of conv and linear weights.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// 8 or 4.
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// channel or tensor.
        #[arg(long, default_value = "channel")]
        granularity: String,
    },
    /// Accuracy, size, FLOPs and latency on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Timed forward passes.
        #[arg(long, default_value_t = 1000)]
        passes: usize,
        /// Also write the row as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Batch-1 latency of the whole model and of each head on its own.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Preset to benchmark when no --model is given.
        #[arg(long, default_value = "mini-mimo")]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        passes: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
    },
    /// Run the staged pipeline described by --config.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Print the default configuration and exit.
        #[arg(long)]
        print_default: bool,
    },
}

fn exit_code(e: &MimoError) -> u8 {
    match e {
        MimoError::Config(_)
        | MimoError::Usage(_)
        | MimoError::Parse { .. }
        | MimoError::Graph { .. }
        | MimoError::Shape { .. } => 2,
        MimoError::Numerical(_) => 3,
        MimoError::Corrupt(_) | MimoError::Io(_) => 1,
    }
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(common: &Common) -> Result<ModelGraph> {
    let path = common
        .model
        .as_ref()
        .ok_or_else(|| MimoError::Usage("--model is required".into()))?;
    io::load(path)
}

fn out_path(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| MimoError::Usage("--out is required".into()))
}

fn save(graph: &ModelGraph, common: &Common) -> Result<()> {
    let path = out_path(common)?;
    io::save(graph, path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            preset,
            vib,
            gamma,
            epochs,
            lr,
            n,
        } => {
            let mut cfg = config(&common)?;
            if let Some(n) = n {
                cfg.data.n = n;
            }
            let (train_set, test_set) = cfg.datasets()?;
            let graph = match &common.model {
                Some(_) => load_model(&common)?,
                None => build_preset(preset.parse::<Preset>()?, cfg.seed),
            };
            let opts = cfg.train_options(
                epochs.unwrap_or(cfg.train.epochs),
                lr.unwrap_or(cfg.train.lr),
                cfg.seed,
            );
            let (trained, report) = if vib {
                let probe = insert_gates(&graph, &VibConfig::with_gate_count(1))?;
                let mut vcfg = cfg.vib_config(vib::gate_sites(&probe).len());
                if let Some(g) = gamma {
                    vcfg.gamma_reg = g;
                }
                let gated = insert_gates(&graph, &vcfg)?;
                let (t, r) = vib::train_vib(&gated, &train_set, &vcfg, &opts)?;
                println!("regularizer {:.4}", r.regularizer);
                (t, r.train)
            } else {
                train(&graph, &train_set, &opts)?
            };
            println!(
                "loss {:.4} -> {:.4} over {} steps",
                report.initial_loss,
                report.final_loss(),
                report.steps
            );
            let acc = accuracy(&trained, &test_set)?;
            for (head, a) in acc {
                println!("{head}: {a:.2}%");
            }
            save(&trained, &common)
        }
        Command::Prune { common, tau } => {
            let graph = load_model(&common)?;
            if vib::gate_sites(&graph).is_empty() {
                return Err(MimoError::Usage(
                    "model has no gates; train it with --vib first".into(),
                ));
            }
            let vcfg = VibConfig {
                tau,
                ..VibConfig::with_gate_count(1)
            };
            let masks = compute_masks(&graph, &vcfg)?;
            println!("{}", MaskReport::from_masks(&masks));
            save(&prune_structural(&graph, &masks)?, &common)
        }
        Command::FoldBn { common } => {
            let (g, report) = fold_graph(&load_model(&common)?)?;
            println!("folded {} batchnorm layers", report.folded.len());
            save(&g, &common)
        }
        Command::Merge {
            common,
            budget,
            calib,
            damping,
        } => {
            let cfg = config(&common)?;
            let graph = load_model(&common)?;
            let (train_set, _) = cfg.datasets()?;
            let mcfg = MergeConfig {
                budgets: parse_budgets(&budget)?,
                damping: Damping::RelativeTrace(damping),
                patch_cap: cfg.merge.patch_cap,
                seed: cfg.seed.wrapping_add(3),
            };
            let (g, report, _) = zip_branches(&graph, &train_set.head(calib)?.inputs(), &mcfg)?;
            println!("{report}");
            save(&g, &common)
        }
        Command::Quantize {
            common,
            bits,
            granularity,
        } => {
            let g = quantize_model(
                &load_model(&common)?,
                Bits::from_width(bits)?,
                granularity.parse::<Granularity>()?,
            )?;
            save(&g, &common)
        }
        Command::Eval {
            common,
            passes,
            json,
        } => {
            let cfg = config(&common)?;
            let graph = load_model(&common)?;
            let (_, test_set) = cfg.datasets()?;
            let lat = LatencyOptions {
                passes,
                ..cfg.latency()
            };
            let row = evaluate(&graph, &test_set, "eval", lat)?;
            print!("{}", render_table(std::slice::from_ref(&row)));
            if let Some(p) = json {
                std::fs::write(p, render_json(&[row])?)?;
            }
            Ok(())
        }
        Command::Bench {
            common,
            preset,
            passes,
            warmup,
        } => {
            let cfg = config(&common)?;
            let graph = match &common.model {
                Some(_) => load_model(&common)?,
                None => build_preset(preset.parse::<Preset>()?, cfg.seed),
            };
            let opts = LatencyOptions { warmup, passes };
            // latency does not depend on input values
            let inputs: BTreeMap<String, Tensor> = graph
                .inputs
                .iter()
                .map(|d| {
                    let mut shape = vec![1];
                    shape.extend(&d.shape);
                    (d.name.clone(), Tensor::zeros(&shape))
                })
                .collect();
            let whole = measure_latency(&graph, &inputs, opts)?;
            println!(
                "all heads      mean {:.4} ms  median-of-means {:.4} ms",
                whole.mean_ms, whole.median_of_means_ms
            );
            let mut sum = 0.0;
            for out in &graph.outputs {
                let sub = head_subgraph(&graph, &out.name)?;
                let sub_inputs = inputs
                    .iter()
                    .filter(|(k, _)| sub.inputs.iter().any(|d| &d.name == *k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                let s = measure_latency(&sub, &sub_inputs, opts)?;
                sum += s.mean_ms;
                println!("head {:<10} mean {:.4} ms", out.name, s.mean_ms);
            }
            println!("separate heads total {sum:.4} ms");
            Ok(())
        }
        Command::Pipeline {
            common,
            print_default,
        } => {
            if print_default {
                print!("{}", PipelineConfig::default().to_toml()?);
                return Ok(());
            }
            if common.config.is_none() {
                return Err(MimoError::Usage("pipeline needs --config".into()));
            }
            let mut cfg = config(&common)?;
            if let Some(m) = &common.model {
                cfg.init_model = Some(m.clone());
            }
            let outcome = run_pipeline(&cfg, common.out.as_deref())?;
            print!("{}", render_table(&outcome.rows));
            if let Some(r) = &outcome.mask_report {
                println!("{r}");
            }
            if let Some(r) = &outcome.merge_report {
                println!("{r}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
