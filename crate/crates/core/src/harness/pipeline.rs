//! Staged compression pipeline driven by a TOML config.
//!
//! Stages always run in the order
//! `train → vib-prune → fine-tune → merge → fold-bn → quantize → evaluate`;
//! a config may list any subset. Each stage appends one metrics row and,
//! when an output directory is given, saves its model.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use super::eval::{evaluate, LatencyOptions, MetricsReport};
use super::report::{render_json, render_table};
use super::train::{train, TrainOptions};
use crate::error::{MimoError, Result};
use crate::graph::{build_preset, io, ModelGraph, Preset};
use crate::passes::bnfold::fold_graph;
use crate::passes::mtz::{zip_branches, Damping, MergeConfig, MergePlan, MergeReport};
use crate::passes::quant::{quantize_model, Bits, Granularity};
use crate::passes::vib::{
    self, compute_masks, insert_gates, prune_structural, MaskReport, MaskSet, VibConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    VibPrune,
    FineTune,
    Merge,
    FoldBn,
    Quantize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Train,
        Stage::VibPrune,
        Stage::FineTune,
        Stage::Merge,
        Stage::FoldBn,
        Stage::Quantize,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::VibPrune => "vib-prune",
            Stage::FineTune => "fine-tune",
            Stage::Merge => "merge",
            Stage::FoldBn => "fold-bn",
            Stage::Quantize => "quantize",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = MimoError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| MimoError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 1000,
            seed: 7,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainOptions::default();
        TrainSection {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VibSection {
    pub epochs: usize,
    pub lr: f32,
    /// Defaults to `1e-3 / #gates` when absent.
    pub gamma_reg: Option<f32>,
    pub tau: f64,
    pub mu_init: f32,
    pub log_sigma2_init: f32,
}

impl Default for VibSection {
    fn default() -> Self {
        VibSection {
            epochs: 20,
            lr: 0.02,
            gamma_reg: None,
            tau: 1e-2,
            mu_init: 1.0,
            log_sigma2_init: -2.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSection {
    pub epochs: usize,
    /// Multiplier on the base training rate.
    pub lr_scale: f32,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        FineTuneSection {
            epochs: 10,
            lr_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    /// One entry for every aligned layer pair, or one per pair in order.
    pub budgets: Vec<usize>,
    /// Calibration samples taken from the training split.
    pub calib: usize,
    /// Relative damping `c` in `λ = c·trace/F`.
    pub damping: f64,
    pub patch_cap: usize,
    pub fine_tune_epochs: usize,
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection {
            budgets: vec![2],
            calib: 256,
            damping: 1e-3,
            patch_cap: 10_000,
            fine_tune_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub bits: u32,
    pub granularity: String,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            bits: 8,
            granularity: "channel".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub latency_passes: usize,
    pub warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = LatencyOptions::default();
        EvalSection {
            latency_passes: d.passes,
            warmup: d.warmup,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    /// Start from a saved model instead of a freshly built preset.
    pub init_model: Option<PathBuf>,
    pub stages: Vec<Stage>,
    pub data: DataSection,
    pub train: TrainSection,
    pub vib: VibSection,
    pub fine_tune: FineTuneSection,
    pub merge: MergeSection,
    pub quantize: QuantSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preset: "mini-mimo".into(),
            seed: 7,
            init_model: None,
            stages: Stage::ALL.to_vec(),
            data: DataSection::default(),
            train: TrainSection::default(),
            vib: VibSection::default(),
            fine_tune: FineTuneSection::default(),
            merge: MergeSection::default(),
            quantize: QuantSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| MimoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| MimoError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MimoError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.preset
            .parse::<Preset>()
            .map_err(|e| MimoError::Config(e.to_string()))?;
        if self.stages.is_empty() {
            return Err(MimoError::Config("no stages listed".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MimoError::Config(format!(
                "stages must be distinct and follow the order {}",
                Stage::ALL.map(|s| s.name()).join(" → ")
            )));
        }
        Bits::from_width(self.quantize.bits)?;
        self.quantize.granularity.parse::<Granularity>()?;
        if self.eval.latency_passes == 0 {
            return Err(MimoError::Config(
                "eval.latency_passes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn train_options(&self, epochs: usize, lr: f32, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs,
            lr,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            seed,
            vib_gamma: None,
        }
    }

    pub fn latency(&self) -> LatencyOptions {
        LatencyOptions {
            warmup: self.eval.warmup,
            passes: self.eval.latency_passes,
        }
    }

    pub fn vib_config(&self, gate_layers: usize) -> VibConfig {
        let d = VibConfig::with_gate_count(gate_layers);
        VibConfig {
            gamma_reg: self.vib.gamma_reg.unwrap_or(d.gamma_reg),
            tau: self.vib.tau,
            mu_init: self.vib.mu_init,
            log_sigma2_init: self.vib.log_sigma2_init,
        }
    }

    pub fn datasets(&self) -> Result<(SyntheticDataset, SyntheticDataset)> {
        SyntheticDataset::generate(self.data.seed, self.data.n)?
            .split(self.data.seed, self.data.test_fraction)
    }
}

/// Everything a pipeline run produced.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub rows: Vec<MetricsReport>,
    pub graph: ModelGraph,
    /// Model after the train stage.
    pub baseline: Option<ModelGraph>,
    /// Gated model after VIB training, before pruning.
    pub gated: Option<ModelGraph>,
    pub masks: Option<MaskSet>,
    pub mask_report: Option<MaskReport>,
    pub merge_plans: Vec<MergePlan>,
    pub merge_report: Option<MergeReport>,
    pub files: Vec<PathBuf>,
}

fn in_stage(stage: Stage, e: MimoError) -> MimoError {
    let s = stage.name();
    match e {
        MimoError::Config(m) => MimoError::Config(format!("stage {s}: {m}")),
        MimoError::Usage(m) => MimoError::Usage(format!("stage {s}: {m}")),
        MimoError::Numerical(m) => MimoError::Numerical(format!("stage {s}: {m}")),
        MimoError::Graph { node, message } => MimoError::Graph {
            node,
            message: format!("stage {s}: {message}"),
        },
        other => other,
    }
}

/// Runs the configured stages. With `out_dir`, every stage's model is saved
/// as `NN-stage.mimo` next to `report.txt`, `report.json`, `masks.json`
/// and `merge.json`. A failing stage saves the model it started from as
/// `last-good.mimo`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let (train_set, test_set) = cfg.datasets()?;
    let mut graph = match &cfg.init_model {
        Some(p) => io::load(p)?,
        None => build_preset(cfg.preset.parse()?, cfg.seed),
    };
    let mut out = PipelineOutcome {
        rows: Vec::new(),
        graph: graph.clone(),
        baseline: None,
        gated: None,
        masks: None,
        mask_report: None,
        merge_plans: Vec::new(),
        merge_report: None,
        files: Vec::new(),
    };
    for (i, &stage) in cfg.stages.iter().enumerate() {
        let step = run_stage(cfg, stage, graph.clone(), &train_set, &mut out)
            .and_then(|g| Ok((evaluate(&g, &test_set, stage.name(), cfg.latency())?, g)));
        let (row, next) = match step {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = out_dir {
                    io::save(&graph, dir.join("last-good.mimo"))?;
                }
                return Err(in_stage(stage, e));
            }
        };
        graph = next;
        out.rows.push(row);
        if let Some(dir) = out_dir {
            let path = dir.join(format!("{:02}-{}.mimo", i + 1, stage.name()));
            io::save(&graph, &path)?;
            out.files.push(path);
        }
    }
    out.graph = graph;
    if let Some(dir) = out_dir {
        fs::write(dir.join("report.txt"), render_table(&out.rows))?;
        fs::write(dir.join("report.json"), render_json(&out.rows)?)?;
        if let Some(m) = &out.masks {
            fs::write(dir.join("masks.json"), to_json(m)?)?;
        }
        if !out.merge_plans.is_empty() {
            fs::write(dir.join("merge.json"), to_json(&out.merge_plans)?)?;
        }
    }
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| MimoError::Usage(e.to_string()))
}

fn run_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    graph: ModelGraph,
    train_set: &SyntheticDataset,
    out: &mut PipelineOutcome,
) -> Result<ModelGraph> {
    match stage {
        Stage::Train => {
            let opts = cfg.train_options(cfg.train.epochs, cfg.train.lr, cfg.seed);
            let (g, _) = train(&graph, train_set, &opts)?;
            out.baseline = Some(g.clone());
            Ok(g)
        }
        Stage::VibPrune => {
            let probe = insert_gates(&graph, &VibConfig::with_gate_count(1))?;
            let vcfg = cfg.vib_config(vib::gate_sites(&probe).len());
            let gated = insert_gates(&graph, &vcfg)?;
            let opts = cfg.train_options(cfg.vib.epochs, cfg.vib.lr, cfg.seed.wrapping_add(1));
            let (trained, _) = vib::train_vib(&gated, train_set, &vcfg, &opts)?;
            let masks = compute_masks(&trained, &vcfg)?;
            let pruned = prune_structural(&trained, &masks)?;
            out.mask_report = Some(MaskReport::from_masks(&masks));
            out.masks = Some(masks);
            out.gated = Some(trained);
            Ok(pruned)
        }
        Stage::FineTune => {
            let lr = cfg.train.lr * cfg.fine_tune.lr_scale;
            let opts = cfg.train_options(cfg.fine_tune.epochs, lr, cfg.seed.wrapping_add(2));
            Ok(train(&graph, train_set, &opts)?.0)
        }
        Stage::Merge => {
            let calib = train_set.head(cfg.merge.calib)?;
            let mcfg = MergeConfig {
                budgets: cfg.merge.budgets.clone(),
                damping: Damping::RelativeTrace(cfg.merge.damping),
                patch_cap: cfg.merge.patch_cap,
                seed: cfg.seed.wrapping_add(3),
            };
            let (mut g, report, plans) = zip_branches(&graph, &calib.inputs(), &mcfg)?;
            if cfg.merge.fine_tune_epochs > 0 {
                let lr = cfg.train.lr * cfg.fine_tune.lr_scale;
                let opts =
                    cfg.train_options(cfg.merge.fine_tune_epochs, lr, cfg.seed.wrapping_add(4));
                g = train(&g, train_set, &opts)?.0;
            }
            out.merge_report = Some(report);
            out.merge_plans = plans;
            Ok(g)
        }
        Stage::FoldBn => Ok(fold_graph(&graph)?.0),
        Stage::Quantize => {
            let bits = Bits::from_width(cfg.quantize.bits)?;
            quantize_model(&graph, bits, cfg.quantize.granularity.parse()?)
        }
        Stage::Evaluate => Ok(graph),
    }
}
