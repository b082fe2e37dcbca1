//! Built-in model configurations.
//!
//! The mini presets take two `1×16×16` modalities and are small enough to
//! train in seconds on one core. `paper-mimo` is a two-branch ResNet-18
//! used only for parameter-count cross-checks; its inputs are `33×33` so
//! that every stride-2 stage has an integral output extent.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ConvBn, ConvLayer, InputDecl, LayerNode, MainPath, ModelGraph, NodeKind, OutputDecl,
    ResidualBlockParams,
};
use crate::error::MimoError;
use crate::ops::{BnParams, ConvParams, LinearParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Two branches, two heads.
    MiniMimo,
    /// Two branches, task-1 head only.
    MiniMiso,
    /// Image branch only, task-1 head only.
    MiniSiso,
    PaperMimo,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::MiniMimo,
        Preset::MiniMiso,
        Preset::MiniSiso,
        Preset::PaperMimo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MiniMimo => "mini-mimo",
            Preset::MiniMiso => "mini-miso",
            Preset::MiniSiso => "mini-siso",
            Preset::PaperMimo => "paper-mimo",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = MimoError;

    fn from_str(s: &str) -> Result<Self, MimoError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                MimoError::Usage(format!(
                    "unknown preset `{s}` (expected mini-mimo, mini-miso, mini-siso or paper-mimo)"
                ))
            })
    }
}

/// Seeded He-style uniform initializer: weights in `±sqrt(6/fan_in)`,
/// zero biases, identity batchnorm.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("positive shape")
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvParams {
        let w = self.uniform(&[cout, cin, k, k], cin * k * k);
        ConvParams::new(w, Tensor::zeros(&[cout]), stride, pad).expect("valid conv")
    }

    fn conv_bn(&mut self, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvBn {
        ConvBn {
            conv: ConvLayer::Conv(self.conv(cin, cout, k, stride, pad)),
            bn: Some(BnParams::identity(cout)),
        }
    }

    fn linear(&mut self, fin: usize, fout: usize) -> LinearParams {
        LinearParams::new(self.uniform(&[fout, fin], fin), Tensor::zeros(&[fout]))
            .expect("valid linear")
    }

    /// `k1 = (kernel, pad)` shapes the first conv; the second is 3×3. A
    /// strided or widening block gets a `proj_k` projection on the bypass.
    fn block(
        &mut self,
        cin: usize,
        cout: usize,
        stride: usize,
        k1: (usize, usize),
        proj_k: usize,
    ) -> ResidualBlockParams {
        let conv1 = self.conv_bn(cin, cout, k1.0, stride, k1.1);
        let conv2 = self.conv_bn(cout, cout, 3, 1, 1);
        let downsample =
            (stride != 1 || cin != cout).then(|| self.conv_bn(cin, cout, proj_k, stride, 0));
        ResidualBlockParams {
            main: Some(MainPath {
                conv1,
                gate1: None,
                conv2,
                gate2: None,
                recover: None,
            }),
            downsample,
        }
    }
}

struct Builder {
    init: Init,
    nodes: Vec<LayerNode>,
}

impl Builder {
    fn push(&mut self, id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> String {
        let node = LayerNode::new(id, kind, inputs);
        let id = node.id.clone();
        self.nodes.push(node);
        id
    }

    fn mini_branch(&mut self, b: &str) -> String {
        let stem = self.init.conv(1, 8, 3, 1, 1);
        let x = self.push(format!("{b}.stem"), NodeKind::Conv(stem), &[b]);
        let x = self.push(
            format!("{b}.stem_bn"),
            NodeKind::Bn(BnParams::identity(8)),
            &[&x],
        );
        let x = self.push(format!("{b}.stem_relu"), NodeKind::Relu, &[&x]);
        let blk = self.init.block(8, 8, 1, (3, 1), 1);
        let x = self.push(format!("{b}.block1"), NodeKind::ResidualBlock(blk), &[&x]);
        // 4×4/s2/p1 and a 2×2/s2 projection halve 16×16 exactly
        let blk = self.init.block(8, 16, 2, (4, 1), 2);
        let x = self.push(format!("{b}.block2"), NodeKind::ResidualBlock(blk), &[&x]);
        self.push(format!("{b}.pool"), NodeKind::GlobalPool, &[&x])
    }

    fn resnet18_branch(&mut self, b: &str, cin: usize) -> String {
        let stem = self.init.conv(cin, 64, 7, 2, 3);
        let x = self.push(format!("{b}.stem"), NodeKind::Conv(stem), &[b]);
        let x = self.push(
            format!("{b}.stem_bn"),
            NodeKind::Bn(BnParams::identity(64)),
            &[&x],
        );
        let mut x = self.push(format!("{b}.stem_relu"), NodeKind::Relu, &[&x]);
        let mut c = 64;
        for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
            for i in 0..2 {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let blk = self.init.block(c, width, stride, (3, 1), 1);
                x = self.push(
                    format!("{b}.layer{}.{i}", stage + 1),
                    NodeKind::ResidualBlock(blk),
                    &[&x],
                );
                c = width;
            }
        }
        self.push(format!("{b}.pool"), NodeKind::GlobalPool, &[&x])
    }

    /// Linear + relu stages over `widths`, returning the last relu id.
    fn trunk(&mut self, input: &str, widths: &[usize]) -> String {
        let mut x = input.to_string();
        for (i, pair) in widths.windows(2).enumerate() {
            let p = self.init.linear(pair[0], pair[1]);
            let fc = self.push(format!("fc{}", i + 1), NodeKind::Linear(p), &[&x]);
            x = self.push(format!("fc{}_relu", i + 1), NodeKind::Relu, &[&fc]);
        }
        x
    }

    fn head(&mut self, name: &str, input: &str, fin: usize, classes: usize) -> OutputDecl {
        let p = self.init.linear(fin, classes);
        let id = self.push(format!("head_{name}"), NodeKind::Linear(p), &[input]);
        OutputDecl {
            name: name.into(),
            node: id,
        }
    }
}

fn input(name: &str, shape: &[usize]) -> InputDecl {
    InputDecl {
        name: name.into(),
        shape: shape.to_vec(),
    }
}

/// Builds a preset with weights drawn from `ChaCha8Rng(seed)`.
pub fn build_preset(preset: Preset, seed: u64) -> ModelGraph {
    let mut b = Builder {
        init: Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        },
        nodes: Vec::new(),
    };
    let (inputs, outputs) = match preset {
        Preset::MiniMimo | Preset::MiniMiso => {
            let a = b.mini_branch("image");
            let c = b.mini_branch("audio");
            let f = b.push("fuse", NodeKind::Concat, &[&a, &c]);
            let t = b.trunk(&f, &[32, 32, 32, 16]);
            let mut outs = vec![b.head("task1", &t, 16, 4)];
            if preset == Preset::MiniMimo {
                outs.push(b.head("task2", &t, 16, 2));
            }
            (
                vec![input("image", &[1, 16, 16]), input("audio", &[1, 16, 16])],
                outs,
            )
        }
        Preset::MiniSiso => {
            let a = b.mini_branch("image");
            let t = b.trunk(&a, &[16, 32, 32, 16]);
            (
                vec![input("image", &[1, 16, 16])],
                vec![b.head("task1", &t, 16, 4)],
            )
        }
        Preset::PaperMimo => {
            let a = b.resnet18_branch("image", 3);
            let c = b.resnet18_branch("audio", 1);
            let f = b.push("fuse", NodeKind::Concat, &[&a, &c]);
            let t = b.trunk(&f, &[1024, 2048, 512, 128]);
            let outs = vec![b.head("emotion", &t, 128, 8), b.head("gender", &t, 128, 2)];
            (
                vec![input("image", &[3, 33, 33]), input("audio", &[1, 33, 33])],
                outs,
            )
        }
    };
    ModelGraph {
        inputs,
        nodes: b.nodes,
        outputs,
        ties: Vec::new(),
    }
}
