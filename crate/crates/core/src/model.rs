//! ResNet builders with binary blocks between a real stem and a real
//! classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, ParamId, Tape, Var};
use crate::block::{kaiming_normal, BlockConfig, BuildingBlock, Pass};
use crate::error::{Error, Result};
use crate::normalize::{BatchNorm, Mode};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    Resnet18,
    Resnet20,
    /// ResNet-20 at a quarter of its width; a small test architecture.
    ResnetTiny,
}

impl Arch {
    fn stages(self) -> (&'static [usize], usize, f64) {
        match self {
            Arch::Resnet18 => (&[64, 128, 256, 512], 2, 1.0),
            Arch::Resnet20 => (&[16, 32, 64], 3, 1.0),
            Arch::ResnetTiny => (&[16, 32, 64], 3, 0.25),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Resnet18 => "RESNET18",
            Arch::Resnet20 => "RESNET20",
            Arch::ResnetTiny => "RESNET_TINY",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "RESNET18" | "R18" => Arch::Resnet18,
            "RESNET20" | "R20" => Arch::Resnet20,
            "RESNET_TINY" => Arch::ResnetTiny,
            _ => return Err(Error::Config(format!("unknown architecture `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Repairs shared by every block; width and stride are set per block.
    pub block: BlockConfig,
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub width_multiplier: f64,
    /// 7x7 stride-2 stem with max pooling (ResNet-18 only).
    pub imagenet_stem: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Resnet20,
            block: BlockConfig::default(),
            num_classes: 10,
            input_shape: [3, 32, 32],
            width_multiplier: 1.0,
            imagenet_stem: false,
        }
    }
}

impl ModelConfig {
    /// Channel count of every stage after width scaling.
    pub fn stage_channels(&self) -> Result<Vec<usize>> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        let (base, _, arch_width) = self.arch.stages();
        base.iter()
            .map(|&c| {
                let scaled = (c as f64 * arch_width * self.width_multiplier).round() as usize;
                if scaled == 0 {
                    Err(Error::Config(format!(
                        "width multiplier {} leaves a stage of {c} channels empty",
                        self.width_multiplier
                    )))
                } else {
                    Ok(scaled)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub geometry: ConvGeometry,
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub stem: Stem,
    pub blocks: Vec<BuildingBlock>,
    pub classifier: Classifier,
}

/// Builds a model with parameters drawn from a generator seeded by `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.block.validate()?;
    if cfg.num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    if cfg.imagenet_stem && cfg.arch != Arch::Resnet18 {
        return Err(Error::Config(format!(
            "the ImageNet stem is only defined for RESNET18, not {}",
            cfg.arch
        )));
    }
    let channels = cfg.stage_channels()?;
    let (_, blocks_per_stage, _) = cfg.arch.stages();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();

    let [in_c, _, _] = cfg.input_shape;
    let (k, geometry) = if cfg.imagenet_stem {
        (7, ConvGeometry::new(2, 3, 0.0))
    } else {
        (3, ConvGeometry::new(1, 1, 0.0))
    };
    let stem = Stem {
        weight: params.add(
            "stem.weight",
            ParamRole::RealConvWeight,
            kaiming_normal(&[channels[0], in_c, k, k], &mut rng),
        ),
        bn: BatchNorm::new(&mut params, "stem.bn", channels[0]),
        geometry,
        max_pool: cfg.imagenet_stem,
    };

    let mut blocks = Vec::new();
    let mut prev = channels[0];
    for (s, &c) in channels.iter().enumerate() {
        for b in 0..blocks_per_stage {
            let block_cfg = BlockConfig {
                channels: c,
                stride: if s > 0 && b == 0 { 2 } else { 1 },
                ..cfg.block.clone()
            };
            blocks.push(BuildingBlock::new(
                &block_cfg,
                &mut params,
                &format!("stage{s}.block{b}"),
                prev,
                &mut rng,
            )?);
            prev = c;
        }
    }

    let classifier = Classifier {
        weight: params.add(
            "fc.weight",
            ParamRole::LinearWeight,
            kaiming_normal(&[cfg.num_classes, prev], &mut rng),
        ),
        bias: params.add(
            "fc.bias",
            ParamRole::Bias,
            Tensor::zeros(&[cfg.num_classes]),
        ),
    };
    Ok(Model {
        cfg: cfg.clone(),
        params,
        stem,
        blocks,
        classifier,
    })
}

impl Model {
    /// Records a forward pass of `x` on `tape` and returns the logits.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, pass: Pass) -> Result<Var> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.cfg.input_shape {
            return Err(Error::Shape(format!(
                "model expects inputs of shape {:?}, got {:?}",
                self.cfg.input_shape,
                &x.shape()[1..]
            )));
        }
        let Model {
            params,
            stem,
            blocks,
            classifier,
            ..
        } = self;
        let params = &*params;
        let xv = tape.constant(x.clone());
        let sw = params.on_tape(tape, stem.weight);
        let mut h = tape.conv2d(xv, sw, stem.geometry)?;
        h = stem.bn.forward(tape, params, h, pass.mode)?;
        if stem.max_pool {
            h = tape.max_pool2d(h, 3, 2, 1)?;
        }
        for block in blocks.iter_mut() {
            h = block.forward(tape, params, h, pass)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let fw = params.on_tape(tape, classifier.weight);
        let fb = params.on_tape(tape, classifier.bias);
        tape.linear(pooled, fw, fb)
    }

    /// Logits of `x` in eval mode.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, x, Pass::eval())?;
        Ok(tape.value(y).clone())
    }

    pub fn needs_calibration(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| b.units())
            .any(|u| u.needs_calibration())
    }

    /// Runs `x` once in calibration mode and stores the resulting LFI
    /// scaling factors.
    pub fn calibrate(&mut self, x: &Tensor, pass: Pass) -> Result<()> {
        let mut tape = Tape::new();
        self.forward(
            &mut tape,
            x,
            Pass {
                mode: Mode::Calibrate,
                ..pass
            },
        )?;
        let Model { params, blocks, .. } = self;
        for block in blocks.iter_mut() {
            for unit in block.units_mut() {
                unit.apply_calibration(params);
            }
        }
        Ok(())
    }

    pub fn binary_conv_count(&self) -> usize {
        self.blocks.len() * 2
    }

    pub fn param_summary(&self) -> ParamSummary {
        let mut layers: Vec<LayerCount> = Vec::new();
        for (_, p) in self.params.iter() {
            let parts: Vec<&str> = p.name.split('.').collect();
            let end = parts
                .iter()
                .position(|c| matches!(*c, "stem" | "fc" | "conv1" | "conv2" | "shortcut"))
                .map_or(parts.len(), |i| i + 1);
            let layer = parts[..end].join(".");
            let idx = match layers.iter().position(|l| l.name == layer) {
                Some(i) => i,
                None => {
                    layers.push(LayerCount {
                        name: layer.to_string(),
                        real: 0,
                        binarizable: 0,
                    });
                    layers.len() - 1
                }
            };
            if p.role.is_binarizable() {
                layers[idx].binarizable += p.value.len();
            } else {
                layers[idx].real += p.value.len();
            }
        }
        ParamSummary { layers }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub real: usize,
    pub binarizable: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub layers: Vec<LayerCount>,
}

impl ParamSummary {
    pub fn real_total(&self) -> usize {
        self.layers.iter().map(|l| l.real).sum()
    }

    pub fn binarizable_total(&self) -> usize {
        self.layers.iter().map(|l| l.binarizable).sum()
    }
}

impl fmt::Display for ParamSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>12}",
            "layer", "real", "binarizable"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<width$}  {:>12}  {:>12}",
                l.name, l.real, l.binarizable
            )?;
        }
        write!(
            f,
            "{:<width$}  {:>12}  {:>12}",
            "total",
            self.real_total(),
            self.binarizable_total()
        )
    }
}
